"""Tests for the geomoe package."""
