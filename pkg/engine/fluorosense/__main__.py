import sys

from fluorosense.cli import main

sys.exit(main())
