# Version of etcram
__version__ = "0.1.0"
