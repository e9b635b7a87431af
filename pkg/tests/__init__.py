"""Tests for the MuFL simulator."""
