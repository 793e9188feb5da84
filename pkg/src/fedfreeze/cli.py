"""Command-line entry point: ``fedfreeze {run,client,count-params,estimate-traffic}``."""
import argparse
import json
import logging
import sys

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def _fmt(n) -> str:
    return f"{n:,}"


def cmd_count_params(args) -> int:
    from .registry import ArchitectureDescriptor, count_parameters, trainable_units

    arch = ArchitectureDescriptor.load(args.descriptor)
    pc = count_parameters(arch)
    if args.json:
        print(json.dumps({"name": arch.name, "total": pc.total, "trainable": pc.trainable,
                          "non_trainable": pc.non_trainable, "trainable_units": pc.trainable_units,
                          "unit_params": pc.unit_params, "layers": pc.per_layer}, indent=2))
        return EXIT_OK
    print(f"architecture: {arch.name}  input {tuple(arch.input_shape)}")
    print(f"{'layer':<26}{'kind':<22}{'output shape':<20}{'params':>12}")
    for row in pc.per_layer:
        shape = "(" + ", ".join(str(s) for s in row["output_shape"]) + ")"
        print(f"{row['name']:<26}{row['kind']:<22}{shape:<20}{_fmt(row['params']):>12}")
    print(f"total params: {_fmt(pc.total)}")
    print(f"trainable params: {_fmt(pc.trainable)}")
    print(f"non-trainable params: {_fmt(pc.non_trainable)}")
    print(f"trainable units: {pc.trainable_units}")
    for i, (members, n) in enumerate(zip(trainable_units(arch), pc.unit_params)):
        names = "+".join(arch.layers[j].name for j in members)
        print(f"  unit {i:>2}: {names:<40}{_fmt(n):>12}")
    return EXIT_OK


def cmd_estimate_traffic(args) -> int:
    from .registry import ArchitectureDescriptor
    from .traffic import estimate_uplink, published_reference

    arch = ArchitectureDescriptor.load(args.descriptor)
    est = estimate_uplink(arch, args.layers, args.clients, args.rounds, args.trials, args.seed)
    ref = published_reference(arch.name, args.layers)
    if args.json:
        doc = est.to_dict()
        doc["published_reference"] = ref
        print(json.dumps(doc, indent=2))
        return EXIT_OK
    full_run = est.full_model_bytes * est.clients * est.rounds
    print(f"architecture: {est.architecture}  units {est.n_units}  layers trained {est.layer_budget}")
    print(f"clients {est.clients}  rounds {est.rounds}  trials {est.trials}  seed {args.seed}")
    print(f"full model: {_fmt(est.full_model_bytes)} bytes per upload, "
          f"{_fmt(full_run)} bytes per run")
    print(f"expected uplink fraction: {est.mean_fraction:.4f} "
          f"(95% CI {est.ci95[0]:.4f}..{est.ci95[1]:.4f}, closed form {est.exact_fraction:.4f})")
    print(f"expected uplink bytes: {est.expected_uplink_bytes:,.0f}")
    print(f"expected reduction: {100 * est.reduction:.1f}%")
    print(f"per-round fraction spread (std): {est.per_round_std:.4f}")
    if ref is not None:
        if ref["realized_fraction"] is not None:
            print(f"published reference (single run): uplink {ref['realized_bytes'] / 1e6:.2f}M bytes, "
                  f"fraction {ref['realized_fraction']:.3f}")
        if ref["claimed_reduction"] is not None:
            print(f"published reference reduction claim: {100 * ref['claimed_reduction']:.0f}%")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import RunConfig, run_experiment

    cfg = RunConfig.load(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = run_experiment(cfg)
    last = result.records[-1]
    print(f"completed {cfg.rounds} rounds: accuracy {last.accuracy:.2f}% loss {last.loss:.4f}")
    print(f"artifacts written to {result.output_dir}")
    return EXIT_OK


def cmd_client(args) -> int:
    from .experiment import RunConfig, run_client

    cfg = RunConfig.load(args.config)
    run_client(args.connect, cfg, args.client_id)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedfreeze", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("client", help="join a TCP federation as one client")
    c.add_argument("--connect", required=True, help="host:port of the server")
    c.add_argument("--config", required=True)
    c.add_argument("--client-id", type=int)
    c.set_defaults(func=cmd_client)

    cp = sub.add_parser("count-params", help="print per-layer parameter counts")
    cp.add_argument("descriptor", help="descriptor JSON file or bundled name")
    cp.add_argument("--json", action="store_true")
    cp.set_defaults(func=cmd_count_params)

    et = sub.add_parser("estimate-traffic", help="expected uplink bytes under random selection")
    et.add_argument("descriptor")
    et.add_argument("--layers", type=int, required=True)
    et.add_argument("--clients", type=int, default=10)
    et.add_argument("--rounds", type=int, default=100)
    et.add_argument("--trials", type=int, default=10000)
    et.add_argument("--seed", type=int, default=0)
    et.add_argument("--json", action="store_true")
    et.set_defaults(func=cmd_estimate_traffic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import FedFreezeError

    try:
        return args.func(args)
    except FedFreezeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
