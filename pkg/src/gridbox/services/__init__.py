"""Service layer for gridbox."""
