"""Tests for the tri-branch neural fusion package."""
