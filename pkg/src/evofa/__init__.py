"""Few-shot emotion-recognition laboratory with evolvable test-time adaptation."""

__version__ = "0.1.0"
