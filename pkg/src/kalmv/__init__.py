"""kalmv: retrieve, answer, verify, and rectify for knowledge-augmented QA."""

__version__ = "0.1.0"
