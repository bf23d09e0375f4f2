"""Active TLS behavior probing against fixture or operator-supplied clients."""
