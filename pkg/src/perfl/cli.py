"""Command-line client.

By default commands run against an in-process service instance, so no server
needs to be running; pass --server to talk to a remote one instead. Either
way the request path is identical, which keeps local runs honest about what
the HTTP surface can express.
"""

from __future__ import annotations

import argparse
import sys


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server.rstrip("/"), timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette warns about its own testclient import on this stack
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service import create_app

    return TestClient(create_app())


def _load_config(path: str, overrides) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not overrides:
        return text
    replaced = {o.split("=", 1)[0].strip() for o in overrides if "=" in o}
    kept = []
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        key = stripped.split("=", 1)[0].strip() if "=" in stripped else None
        if key not in replaced:
            kept.append(line)
    return "\n".join(kept) + "\n" + "\n".join(overrides) + "\n"


def _post(client, endpoint: str, payload: dict) -> dict:
    resp = client.post(endpoint, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        print(f"error: {detail}", file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.set)
    with _client(args.server) as client:
        body = _post(client, "/run", {"config": config})
    for line in body["lines"]:
        print(line)
    if body["csv_paths"]:
        for method, path in body["csv_paths"].items():
            print(f"wrote {path}")
    if body["summary_path"]:
        print(f"wrote {body['summary_path']}")
    return 0


def _cmd_certify_lb(args) -> int:
    config = _load_config(args.config, args.set)
    with _client(args.server) as client:
        body = _post(client, "/certify-lb", {"config": config})
    for line in body["lines"]:
        print(line)
    for method, path in body["csv_paths"].items():
        print(f"wrote {path}")
    return 0 if body["ok"] else 1


def _cmd_split(args) -> int:
    payload = {"path": args.data, "clients": args.clients, "mode": args.mode,
               "seed": args.seed, "out": args.out}
    with _client(args.server) as client:
        body = _post(client, "/split", payload)
    print(f"rows={body['rows']} d={body['d']} clients={body['n']} "
          f"per_client={body['m']} dropped={body['dropped']}")
    if body.get("out"):
        print(f"wrote {body['out']}")
    elif body.get("manifest"):
        sys.stdout.write(body["manifest"])
    return 0


def _cmd_gen_quadratic(args) -> int:
    config = _load_config(args.config, args.set)
    with _client(args.server) as client:
        body = _post(client, "/gen-quadratic", {"config": config})
    print(f"wrote {body['path']} (n={body['n']}, d={body['d']})")
    return 0


def _cmd_serve(args) -> int:
    try:
        import uvicorn
    except ImportError:
        print("error: serving requires uvicorn (pip install perfl[serve])",
              file=sys.stderr)
        return 1
    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="perfl",
        description="Personalized federated learning solvers and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None,
                       help="base URL of a running service (default: in-process)")

    def add_config(p):
        p.add_argument("config", help="path to a key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="append/override a config line (repeatable)")

    p_run = sub.add_parser("run", help="run solvers and write trace CSVs")
    add_config(p_run)
    add_server(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_cert = sub.add_parser("certify-lb",
                            help="check iterate distances against the lower bound")
    add_config(p_cert)
    add_server(p_cert)
    p_cert.set_defaults(fn=_cmd_certify_lb)

    p_split = sub.add_parser("split", help="partition a LIBSVM file across clients")
    p_split.add_argument("data", help="LIBSVM file path")
    p_split.add_argument("--clients", type=int, required=True)
    p_split.add_argument("--mode", default="heterogeneous",
                         choices=["heterogeneous", "homogeneous"])
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", default=None,
                         help="write the manifest CSV here instead of stdout")
    add_server(p_split)
    p_split.set_defaults(fn=_cmd_split)

    p_gen = sub.add_parser("gen-quadratic",
                           help="generate a synthetic quadratic instance file")
    add_config(p_gen)
    add_server(p_gen)
    p_gen.set_defaults(fn=_cmd_gen_quadratic)

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
