"""Speech emotion recognition with a CNN + bidirectional GRU encoder trained
under a class-weighted softmax + center loss objective, in plain numpy."""

__version__ = "0.1.0"
