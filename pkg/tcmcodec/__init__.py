# TcmCodec - desk-scale temporal-context-mining conditional video codec
__version__ = "1.0.0"
