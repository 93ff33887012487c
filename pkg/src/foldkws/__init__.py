"""Raw-audio keyword spotting with a once-for-all Conv1D supernet."""

__version__ = "0.1.0"
