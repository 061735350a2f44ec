"""Pipeline for synthesizing, validating, exporting and scoring
disambiguation-heavy multi-turn tool-calling dialogues."""

__version__ = "0.1.0"
