"""Serve the scorer over stdio or TCP.

stdio mode reads requests from stdin and answers on stdout, one line per
request in order, so the process can sit behind a ``cmd:`` endpoint;
diagnostics go to stderr. TCP mode accepts any number of connections,
one thread each, requests answered in order within a connection; the
model registry is shared across connections.
"""

import argparse
import socketserver
import sys

from .protocol import Session, handle_line


def serve_stdio(session: Session) -> None:
    out = sys.stdout.buffer
    for line in sys.stdin.buffer:
        out.write(handle_line(session, line).encode() + b"\n")
        out.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            self.wfile.write(handle_line(self.server.session, line).encode() + b"\n")
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve_tcp(session: Session, host: str, port: int) -> None:
    with _Server((host, port), _Handler) as server:
        server.session = session
        print("listening on %s:%d" % server.server_address[:2],
              file=sys.stderr, flush=True)
        server.serve_forever()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="scorer-adapter",
        description="reference external tile scorer speaking the line protocol",
    )
    parser.add_argument(
        "--tcp", metavar="HOST:PORT",
        help="serve over TCP instead of stdio (port 0 picks a free port)",
    )
    args = parser.parse_args(argv)
    session = Session()
    if args.tcp:
        host, _, port = args.tcp.rpartition(":")
        if not host or not port.isdigit():
            parser.error("--tcp needs HOST:PORT")
        serve_tcp(session, host, int(port))
    else:
        serve_stdio(session)
    return 0
