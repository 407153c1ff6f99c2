"""Desk-scale lab for PII reconstruction from parameter-efficient fine-tuning gradients."""

__version__ = "0.1.0"
