"""Desk-scale spine-surgery navigation and robot-assistance stack."""
