"""Form-meaning mutual information estimation over concept-aligned wordlists."""

__version__ = "0.1.0"
