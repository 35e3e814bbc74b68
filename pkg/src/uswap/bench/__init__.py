"""Workload generation and the ``bench`` experiment driver."""
