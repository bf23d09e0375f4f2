"""Never uses TLS; talks HTTP to the plaintext port only."""

import sys

from ._common import parse_args, plain_fetch


def main() -> int:
    args = parse_args(__doc__)
    try:
        plain_fetch(args)
    except OSError as exc:
        print(f"plaintext: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
