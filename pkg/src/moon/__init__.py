"""Multi-organ esophageal varices grading network on synthetic phantoms."""

__version__ = "0.1.0"
