"""Secure topic-based publish/subscribe over UDP datagrams."""

__version__ = "0.1.0"
