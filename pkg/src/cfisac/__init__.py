"""Joint AP-mode selection and power control for secure cell-free ISAC."""

__version__ = "0.1.0"
