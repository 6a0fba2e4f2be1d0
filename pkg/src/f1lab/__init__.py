"""f1lab: a desk-scale policy lab coupling multi-scale token foresight
generation to a flow-matching action head over a synthetic 2D world."""

__version__ = "0.1.0"
