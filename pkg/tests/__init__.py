"""Tests for the chest radiograph augmentation pipeline."""
