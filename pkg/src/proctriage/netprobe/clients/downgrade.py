"""Verifies certificates, but retries over plain HTTP when the TLS port is unreachable."""

import ssl
import sys

from ._common import parse_args, plain_fetch, tls_fetch


def main() -> int:
    args = parse_args(__doc__)
    ctx = ssl.create_default_context(cafile=args.cafile)
    try:
        tls_fetch(args, ctx)
        return 0
    except ssl.SSLError as exc:
        print(f"downgrade: handshake failed: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"downgrade: {exc}; retrying in plaintext", file=sys.stderr)
    try:
        plain_fetch(args)
    except OSError as exc:
        print(f"downgrade: plaintext retry failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
