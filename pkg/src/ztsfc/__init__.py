"""Zero trust service function chaining: a PEP that classifies requests into
security-function chains carried in HTTP headers over hop-by-hop mutual TLS."""

__version__ = "0.1.0"
