"""Creation, analysis and detection of Trojaned classifiers at desk scale."""

__version__ = "0.1.0"
