"""Certificate verification disabled: accepts any certificate for any name."""

import ssl
import sys

from ._common import parse_args, tls_fetch


def main() -> int:
    args = parse_args(__doc__)
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    try:
        tls_fetch(args, ctx)
    except (ssl.SSLError, OSError) as exc:
        print(f"lax: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
