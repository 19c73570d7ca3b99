# MARIA: masked + autoregressive infilling
__version__ = "1.0.0"
