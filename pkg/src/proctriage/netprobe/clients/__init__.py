"""Small clients with known TLS behavior, used as probe fixtures."""
