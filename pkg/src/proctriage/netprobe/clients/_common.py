import argparse
import socket
import ssl


def parse_args(description: str):
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--tls-port", type=int, required=True)
    ap.add_argument("--watch-port", type=int, required=True)
    ap.add_argument("--cafile", required=True)
    ap.add_argument("--cn", default="exam.test")
    ap.add_argument("--timeout", type=float, default=5.0)
    return ap.parse_args()


def request(cn: str) -> bytes:
    return f"GET /exam HTTP/1.1\r\nHost: {cn}\r\nConnection: close\r\n\r\n".encode()


def tls_fetch(args, ctx: ssl.SSLContext) -> bytes:
    """One HTTPS request; raises on connect or handshake failure."""
    with socket.create_connection((args.host, args.tls_port), timeout=args.timeout) as raw:
        with ctx.wrap_socket(raw, server_hostname=args.cn) as tls:
            tls.sendall(request(args.cn))
            return tls.recv(4096)


def plain_fetch(args) -> bytes:
    with socket.create_connection((args.host, args.watch_port), timeout=args.timeout) as sock:
        sock.sendall(request(args.cn))
        return sock.recv(4096)
