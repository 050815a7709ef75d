"""Theory-guided neural surrogates for 2-D transient saturated groundwater flow."""

__version__ = "0.1.0"
