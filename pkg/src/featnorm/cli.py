"""Command-line client for the experiment service.

Every subcommand builds a request, sends it to the service (an in-process
app instance by default, a remote one with --server), and writes the
returned artifacts to the output directory. Exit codes: 0 success, 1
configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

import httpx

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

OUTPUT_DIR_ENV = "FEATNORM_OUTPUT_DIR"

DEFAULT_REMOVAL = "0:0,1;1:2,3;2:4,0"

# defaults applied after flag > config-file > built-in resolution
DEFAULTS = {
    "learning_rate": 1e-3,
    "momentum": 0.9,
    "gamma": 0.05,
    "delta_r": 1.0,
    "epochs": 80,
    "batch_size": 30,
    "hidden": "",
    "feature_dim": 64,
    "classes": 5,
    "dim": 4,
    "per_class": 200,
    "scenario_seed": 20240,
    "target": 3,
    "seed": 1,
    "seeds": "1,2,3,4,5",
    "regimes": "source_only,fnn,cfnn",
    "sweep_regimes": "fnn,cfnn",
    "delta_r_values": "0.5,1.0,1.5",
    "remove": DEFAULT_REMOVAL,
    "out": None,
    "server": None,
    "host": "127.0.0.1",
    "port": 8414,
}

_INT_LIST = lambda s: [int(v) for v in s.split(",") if v != ""]  # noqa: E731
_FLOAT_LIST = lambda s: [float(v) for v in s.split(",") if v != ""]  # noqa: E731
_STR_LIST = lambda s: [v for v in s.split(",") if v != ""]  # noqa: E731

CONVERTERS = {
    "learning_rate": float,
    "momentum": float,
    "gamma": float,
    "delta_r": float,
    "epochs": int,
    "batch_size": int,
    "hidden": str,
    "feature_dim": int,
    "classes": int,
    "dim": int,
    "per_class": int,
    "scenario_seed": int,
    "target": int,
    "seed": int,
    "seeds": str,
    "regimes": str,
    "delta_r_values": str,
    "remove": str,
    "out": str,
    "server": str,
    "host": str,
    "port": int,
    "scenario": str,
    "name": str,
    "output": str,
    "checkpoint": str,
}


class CliError(Exception):
    """Configuration-level failure; maps to exit code 1."""


class UsageExit(SystemExit):
    def __init__(self, message):
        print(message, file=sys.stderr)
        super().__init__(EXIT_CONFIG)


class Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, per the CLI contract
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def build_parser() -> Parser:
    parser = Parser(prog="featnorm", description="feature-norm domain generalization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--server", help="remote service URL (default: in-process)")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or '.')")

    def scenario_args(p):
        p.add_argument("--scenario", help="path to an exported scenario file")
        p.add_argument("--classes", type=int, help="number of classes K")
        p.add_argument("--dim", type=int, help="input dimensionality")
        p.add_argument("--per-class", dest="per_class", type=int, help="samples per class per domain")
        p.add_argument("--scenario-seed", dest="scenario_seed", type=int, help="generation seed")
        p.add_argument(
            "--domain",
            action="append",
            dest="domains",
            help="domain spec 'rot=0.4 scale=1.0 noise=0.3 classes=0-4 trans=0:0:0:0' (repeatable)",
        )

    def hyper_args(p):
        p.add_argument("--lr", dest="learning_rate", type=float, help="learning rate")
        p.add_argument("--momentum", type=float)
        p.add_argument("--gamma", type=float, help="feature-norm loss weight")
        p.add_argument("--delta-r", dest="delta_r", type=float, help="residual norm step")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--hidden", help="hidden layer widths, e.g. '16,8' (default none)")
        p.add_argument("--feature-dim", dest="feature_dim", type=int)

    p = sub.add_parser("generate", help="generate a scenario file")
    common(p)
    scenario_args(p)
    p.add_argument("--output", help="file name (default scenario.txt)")

    p = sub.add_parser("train", help="one training run: checkpoint + log")
    common(p)
    scenario_args(p)
    hyper_args(p)
    p.add_argument("--regime", required=True, choices=("source_only", "fnn", "cfnn"))
    p.add_argument("--seed", type=int)
    p.add_argument("--target", type=int, help="domain excluded from the sources")
    p.add_argument("--sources", help="explicit source domains, e.g. '0,1,2'")
    p.add_argument("--name", help="output stem (default train_<regime>_s<seed>)")

    p = sub.add_parser("dg", help="leave-one-domain-out experiment")
    common(p)
    scenario_args(p)
    hyper_args(p)
    p.add_argument("--target", type=int)
    p.add_argument("--regimes", help="comma list of regimes")
    p.add_argument("--regime", dest="regimes", help=argparse.SUPPRESS)  # singular alias
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--name", help="output stem (default dg)")

    p = sub.add_parser("catshift", help="category-shift experiment with transfer gain")
    common(p)
    scenario_args(p)
    hyper_args(p)
    p.add_argument("--target", type=int)
    p.add_argument("--regimes", help="comma list of regimes")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--remove", help="removal map 'dom:c1,c2;dom:c3' (default calibrated map)")
    p.add_argument("--name", help="output stem (default catshift)")

    p = sub.add_parser("sweep", help="delta_r sensitivity sweep")
    common(p)
    scenario_args(p)
    hyper_args(p)
    p.add_argument("--target", type=int)
    p.add_argument("--regimes", help="comma list of regimes (default fnn,cfnn)")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--delta-r-values", dest="delta_r_values", help="comma list, e.g. '0.5,1.0,1.5'")
    p.add_argument("--name", help="output stem (default sweep)")

    p = sub.add_parser("embed", help="export feature embeddings for a checkpoint")
    common(p)
    scenario_args(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--output", help="file name (default embeddings.txt)")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host")
    p.add_argument("--port", type=int)

    return parser


def load_config(path: str) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in CONVERTERS:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def resolve(args: argparse.Namespace, config: dict, key: str):
    """Precedence: explicit flag > config file > built-in default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return DEFAULTS.get(key)


def parse_domain_string(text: str, input_dim: int, num_classes: int) -> dict:
    spec = {
        "rotation_angle": 0.0,
        "scale": 1.0,
        "noise_sigma": 0.3,
        "translation": [0.0] * input_dim,
        "present_classes": list(range(num_classes)),
    }
    for token in text.split():
        if "=" not in token:
            raise CliError(f"bad domain token {token!r} (expected key=value)")
        key, _, value = token.partition("=")
        if key == "rot":
            spec["rotation_angle"] = float(value)
        elif key == "scale":
            spec["scale"] = float(value)
        elif key == "noise":
            spec["noise_sigma"] = float(value)
        elif key == "trans":
            spec["translation"] = [float(v) for v in value.split(":")]
        elif key == "classes":
            if "-" in value:
                lo, hi = value.split("-")
                spec["present_classes"] = list(range(int(lo), int(hi) + 1))
            else:
                spec["present_classes"] = [int(v) for v in value.split(":")]
        else:
            raise CliError(f"unknown domain key {key!r}")
    return spec


def parse_removal(text: str) -> dict:
    removal = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        dom, _, classes = part.partition(":")
        try:
            removal[int(dom)] = [int(c) for c in classes.split(",") if c != ""]
        except ValueError as exc:
            raise CliError(f"bad removal entry {part!r}: {exc}") from exc
    if not removal:
        raise CliError(f"empty removal map {text!r}")
    return removal


def scenario_source(args, config) -> dict:
    path = resolve(args, config, "scenario")
    if path is not None:
        try:
            return {"scenario_text": Path(path).read_text(encoding="utf-8")}
        except OSError as exc:
            raise CliError(f"cannot read scenario file: {exc}") from exc
    num_classes = resolve(args, config, "classes")
    input_dim = resolve(args, config, "dim")
    generation = {
        "num_classes": num_classes,
        "input_dim": input_dim,
        "samples_per_class": resolve(args, config, "per_class"),
        "seed": resolve(args, config, "scenario_seed"),
    }
    domains = getattr(args, "domains", None)
    if domains:
        generation["domains"] = [parse_domain_string(d, input_dim, num_classes) for d in domains]
    return {"generation": generation}


def settings_payload(args, config) -> dict:
    hidden = resolve(args, config, "hidden")
    return {
        "learning_rate": resolve(args, config, "learning_rate"),
        "momentum": resolve(args, config, "momentum"),
        "gamma": resolve(args, config, "gamma"),
        "delta_r": resolve(args, config, "delta_r"),
        "epochs": resolve(args, config, "epochs"),
        "batch_size": resolve(args, config, "batch_size"),
        "hidden_dims": _INT_LIST(hidden) if isinstance(hidden, str) else hidden,
        "feature_dim": resolve(args, config, "feature_dim"),
    }


def output_dir(args, config) -> Path:
    out = resolve(args, config, "out") or os.environ.get(OUTPUT_DIR_ENV) or "."
    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    return directory


async def post(server: str | None, route: str, payload: dict) -> dict:
    if server:
        client = httpx.AsyncClient(base_url=server, timeout=None)
    else:
        from .service.app import create_app

        client = httpx.AsyncClient(
            transport=httpx.ASGITransport(app=create_app()),
            base_url="http://featnorm.internal",
            timeout=None,
        )
    async with client:
        response = await client.post(route, json=payload)
    if response.status_code in (400, 422):
        raise CliError(f"service rejected the request: {response.text}")
    response.raise_for_status()
    return response.json()


def call(args, config, route: str, payload: dict) -> dict:
    return asyncio.run(post(resolve(args, config, "server"), route, payload))


def write_text(directory: Path, name: str, text: str) -> Path:
    path = directory / name
    path.write_text(text, encoding="utf-8")
    return path


def summarize_experiment(doc: dict) -> list[str]:
    lines = []
    for row in doc.get("summary", []):
        parts = [
            f"regime={row['regime']}",
            f"delta_r={row['delta_r']}",
            f"shift={int(row['category_shift'])}",
            f"mean_acc={row['mean_accuracy']:.4f}",
            f"std={row['std_accuracy']:.4f}",
        ]
        if row.get("mean_transfer_gain") is not None:
            parts.append(f"transfer_gain={row['mean_transfer_gain']:+.4f}")
        if row.get("mean_degraded_accuracy") is not None:
            parts.append(f"degraded={row['mean_degraded_accuracy']:+.4f}")
        lines.append("  ".join(parts))
    return lines


def run_experiment_command(args, config, route: str, default_name: str, extra: dict) -> int:
    payload = {
        "scenario": scenario_source(args, config),
        "target_domain": resolve(args, config, "target"),
        "seeds": _INT_LIST(str(resolve(args, config, "seeds"))),
        "settings": settings_payload(args, config),
        "experiment_id": getattr(args, "name", None) or default_name,
        **extra,
    }
    result = call(args, config, route, payload)
    directory = output_dir(args, config)
    stem = payload["experiment_id"]
    csv_path = write_text(directory, f"{stem}.csv", result["csv_text"])
    json_path = write_text(directory, f"{stem}.json", result["json_text"])
    for line in summarize_experiment(json.loads(result["json_text"])):
        print(line)
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_generate(args, config) -> int:
    result = call(args, config, "/scenario/generate", scenario_source(args, config)["generation"])
    directory = output_dir(args, config)
    name = getattr(args, "output", None) or "scenario.txt"
    path = write_text(directory, name, result["scenario_text"])
    print(
        f"wrote {path}: {result['num_samples']} samples, "
        f"{result['num_domains']} domains, {result['num_classes']} classes"
    )
    return EXIT_OK


def cmd_train(args, config) -> int:
    payload = {
        "scenario": scenario_source(args, config),
        "regime": args.regime,
        "seed": resolve(args, config, "seed"),
        "target_domain": resolve(args, config, "target"),
        "settings": settings_payload(args, config),
    }
    sources = getattr(args, "sources", None)
    if sources is not None:
        payload["sources"] = _INT_LIST(sources)
    result = call(args, config, "/train", payload)
    directory = output_dir(args, config)
    stem = getattr(args, "name", None) or f"train_{args.regime}_s{payload['seed']}"
    paths = [write_text(directory, f"{stem}.ckpt", result["checkpoint_text"])]
    if result.get("peer_checkpoint_text"):
        paths.append(write_text(directory, f"{stem}.peer.ckpt", result["peer_checkpoint_text"]))
    paths.append(write_text(directory, f"{stem}.log", result["log_text"]))
    print(
        f"{result['steps']} steps, final total loss {result['final_total_loss']:.6f}, "
        f"final mean feature norm {result['final_mean_feature_norm']:.4f}, "
        f"target accuracy {result['target_accuracy']:.4f}"
    )
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_dg(args, config) -> int:
    regimes = _STR_LIST(str(resolve(args, config, "regimes")))
    return run_experiment_command(args, config, "/experiment/dg", "dg", {"regimes": regimes})


def cmd_catshift(args, config) -> int:
    regimes = _STR_LIST(str(resolve(args, config, "regimes")))
    removal = parse_removal(str(resolve(args, config, "remove")))
    return run_experiment_command(
        args,
        config,
        "/experiment/category-shift",
        "catshift",
        {"regimes": regimes, "removed_classes": {str(k): v for k, v in removal.items()}},
    )


def cmd_sweep(args, config) -> int:
    regimes = getattr(args, "regimes", None)
    if regimes is None:
        regimes = config.get("regimes", DEFAULTS["sweep_regimes"])
    values = _FLOAT_LIST(str(resolve(args, config, "delta_r_values")))
    return run_experiment_command(
        args,
        config,
        "/experiment/sweep",
        "sweep",
        {"regimes": _STR_LIST(str(regimes)), "delta_r_values": values},
    )


def cmd_embed(args, config) -> int:
    try:
        checkpoint_text = Path(args.checkpoint).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}") from exc
    payload = {"scenario": scenario_source(args, config), "checkpoint_text": checkpoint_text}
    result = call(args, config, "/embeddings", payload)
    directory = output_dir(args, config)
    name = getattr(args, "output", None) or "embeddings.txt"
    path = write_text(directory, name, result["dump_text"])
    print(f"wrote {path}: {result['num_lines']} lines")
    return EXIT_OK


def cmd_serve(args, config) -> int:
    import uvicorn

    from .service.app import create_app

    host = resolve(args, config, "host")
    port = resolve(args, config, "port")
    uvicorn.run(create_app(), host=host, port=port)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "dg": cmd_dg,
    "catshift": cmd_catshift,
    "sweep": cmd_sweep,
    "embed": cmd_embed,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        config = load_config(args.config) if getattr(args, "config", None) else {}
        return COMMANDS[args.command](args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (httpx.HTTPError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
