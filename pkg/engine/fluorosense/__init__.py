# Módulo fluorosense
__version__ = "1.0.0"
