"""Full chain and hostname verification; never falls back."""

import ssl
import sys

from ._common import parse_args, tls_fetch


def main() -> int:
    args = parse_args(__doc__)
    ctx = ssl.create_default_context(cafile=args.cafile)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    try:
        tls_fetch(args, ctx)
    except (ssl.SSLError, OSError) as exc:
        print(f"strict: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
