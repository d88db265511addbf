"""Command-line orchestration: simulate, strip, fit, evaluate, experiment.

Every command takes an optional JSON config file plus flag overrides; unknown
config keys are rejected with their field path.  All artifacts are written
under --out together with a manifest naming the resolved configuration and
the sha256 of every input they were derived from.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys


def _apply_threads(threads):
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


# thread bound must land before numpy initializes its thread pools
_apply_threads(os.environ.get("IPS_THREADS"))
if "--threads" in sys.argv:
    try:
        _apply_threads(int(sys.argv[sys.argv.index("--threads") + 1]))
    except (ValueError, IndexError):
        pass

import numpy as np  # noqa: E402

from . import basis as basismod  # noqa: E402
from . import baselines, evaluate, models, nn as nnmod, selftest, simulate  # noqa: E402

EXPERIMENT_PRESETS = ("mscaling", "method-comparison", "boundary",
                      "cond-numbers", "nonradial-nn")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path, allowed: dict, where: str) -> dict:
    with open(path) as f:
        cfg = json.load(f)
    for key in cfg:
        if key not in allowed:
            raise SystemExit(f"config error: unknown key '{where}.{key}'")
    return cfg


def _write_manifest(out_dir, command, config, inputs, outputs):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [os.path.basename(str(p)) for p in outputs],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _input_provenance(paths) -> dict:
    return {os.path.basename(str(p)): _sha256(p) for p in paths}


SIM_FIELDS = dict(model="reference", N=10, d=2, M=100, T=1.0, sigma=1.0,
                  dt_fine=1e-3, dt_obs=1e-2, protocol="gap", seed=42,
                  init_std=0.5)


def _sim_config_from_args(args) -> simulate.SimConfig:
    values = dict(SIM_FIELDS)
    if args.config:
        values.update(_load_config(args.config, SIM_FIELDS, "simulate"))
    for key in SIM_FIELDS:
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            values[key] = v
    spec = models.spec_from_name(values["model"], dim=int(values["d"]))
    return simulate.SimConfig(spec=spec, N=int(values["N"]), M=int(values["M"]),
                              T=float(values["T"]), sigma=float(values["sigma"]),
                              dt_fine=float(values["dt_fine"]),
                              dt_obs=float(values["dt_obs"]),
                              protocol=str(values["protocol"]),
                              seed=int(values["seed"]),
                              init_std=float(values["init_std"]))


def _make_basis(args, ds):
    if args.basis == "oracle":
        return basismod.oracle_basis(ds.config.spec)
    if args.basis == "rbf":
        return basismod.rbf_basis_for_dataset(ds, k_per_block=args.rbf_k)
    raise SystemExit(f"config error: unknown value for field 'basis': {args.basis!r}")


def cmd_simulate(args) -> int:
    cfg = _sim_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    ds = simulate.simulate(cfg)
    out_path = os.path.join(args.out, "dataset_labeled.ips")
    simulate.write_dataset(ds, out_path)
    _write_manifest(args.out, "simulate", cfg.to_dict(), [], [out_path])
    print(f"wrote {out_path} [M={ds.M}, L={ds.L}, N={ds.N}, d={ds.d}]")
    return 0


def cmd_strip(args) -> int:
    ds = simulate.read_dataset(args.data)
    stripped = simulate.strip_labels(ds, seed=args.seed)
    stripped.provenance = _input_provenance([args.data])
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "dataset_unlabeled.ips")
    simulate.write_dataset(stripped, out_path)
    _write_manifest(args.out, "strip", {"seed": args.seed, "data": args.data},
                    [args.data], [out_path])
    print(f"wrote {out_path}")
    return 0


def cmd_fit(args) -> int:
    if args.quadrature not in ("riemann", "trapezoid"):
        raise SystemExit(
            f"config error: unknown value for field 'quadrature': {args.quadrature!r}")
    ds = simulate.read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    if args.method == "selftest-nn":
        cfg = nnmod.TrainConfig(seed=args.seed, epochs_max=args.epochs,
                                batch_size=args.batch_size)
        netV, netPhi, history = nnmod.train(ds, cfg)
        pv, pp = (os.path.join(args.out, n) for n in ("netV.mlp", "netPhi.mlp"))
        nnmod.save_checkpoint(netV, pv)
        nnmod.save_checkpoint(netPhi, pp)
        hist_path = os.path.join(args.out, "history.csv")
        with open(hist_path, "w") as f:
            f.write("epoch,loss,lr_V,lr_Phi,val_loss\n")
            for row in history:
                f.write(f"{row['epoch']},{row['loss']},{row['lr_V']},"
                        f"{row['lr_Phi']},{row['val_loss']}\n")
        outputs += [pv, pp, hist_path]
    else:
        basis = _make_basis(args, ds)
        if args.method == "selftest-lse":
            fit = selftest.fit_selftest_lse(ds, basis, args.quadrature)
        elif args.method == "labeled-mle":
            fit = baselines.labeled_mle(ds, basis)
        elif args.method == "sinkhorn-mle":
            fit = baselines.sinkhorn_mle(ds, basis)
        else:
            raise SystemExit(
                f"config error: unknown value for field 'method': {args.method!r}")
        payload = json.loads(fit.to_json())
        payload["inputs"] = _input_provenance([args.data])
        fit_path = os.path.join(args.out, "fit.json")
        with open(fit_path, "w") as f:
            json.dump(payload, f, indent=2)
        outputs.append(fit_path)
    _write_manifest(args.out, "fit",
                    {"method": args.method, "basis": args.basis,
                     "quadrature": args.quadrature, "data": args.data},
                    [args.data], outputs)
    print(f"wrote {', '.join(outputs)}")
    return 0


def cmd_evaluate(args) -> int:
    ds = simulate.read_dataset(args.data)
    spec = ds.config.spec
    with open(args.fit) as f:
        fit = selftest.FitResult.from_json(f.read())
    desc = fit.basis_description
    if desc.get("type") == "oracle":
        basis = basismod.oracle_basis(spec)
    elif desc.get("type") == "rbf":
        basis = basismod.rbf_basis(desc["k_per_block"], desc["r_max"],
                                   desc.get("r_max_phi"))
    else:
        raise SystemExit("config error: fit.json carries no reconstructible basis")
    rho_v, rho_phi = evaluate.radial_densities(ds)
    ev = evaluate.relative_gradient_error((fit, basis), spec, rho_v, "V")
    ep = evaluate.relative_gradient_error((fit, basis), spec, rho_phi, "Phi")
    os.makedirs(args.out, exist_ok=True)
    report = {"model": spec.family, "err_gradV": ev, "err_gradPhi": ep,
              "lambda": fit.lam,
              "inputs": _input_provenance([args.data, args.fit])}
    rpt_path = os.path.join(args.out, "report.json")
    with open(rpt_path, "w") as f:
        json.dump(report, f, indent=2)
    _write_manifest(args.out, "evaluate", {"data": args.data, "fit": args.fit},
                    [args.data, args.fit], [rpt_path])
    print(json.dumps({k: report[k] for k in ("model", "err_gradV", "err_gradPhi")}))
    return 0


# ---------------------------------------------------------------------------
# named experiment presets (desk-scale versions of the published tables)
# ---------------------------------------------------------------------------

def _preset_pool(model, M, dt_fine, dt_obs, seed, N=10, d=2):
    spec = models.spec_from_name(model, dim=d)
    protocol = "zerogap" if abs(dt_fine - dt_obs) < 1e-15 else "gap"
    cfg = simulate.SimConfig(spec=spec, N=N, M=M, T=1.0, sigma=1.0,
                             dt_fine=dt_fine, dt_obs=dt_obs, protocol=protocol,
                             seed=seed)
    return simulate.simulate(cfg), spec


def cmd_experiment(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    rows = []
    seed = args.seed
    if args.preset == "mscaling":
        M_list = [50, 200, 1000]
        trials = args.trials
        pool, spec = _preset_pool("reference", max(M_list) * trials,
                                  args.dt_fine, 1e-2, seed)
        rho_v, rho_phi = evaluate.radial_densities(pool)
        for quad in ("riemann", "trapezoid"):
            rows += evaluate.experiment_mscaling(
                pool, spec, lambda b: basismod.oracle_basis(spec), quad,
                [1e-2, 1e-1], M_list, trials, rho_v, rho_phi)
    elif args.preset == "method-comparison":
        M = args.M or 2000
        pool, spec = _preset_pool("reference", M, args.dt_fine, 1e-2, seed)
        rho_v, rho_phi = evaluate.radial_densities(pool)
        rows += evaluate.experiment_method_comparison(
            pool, spec, lambda b: basismod.oracle_basis(spec), [1e-2, 1e-1],
            ["selftest-lse", "labeled-mle", "sinkhorn-mle"], M, 1, rho_v, rho_phi)
    elif args.preset == "boundary":
        M = args.M or 500
        for model in ("smoothness", "conditioning", "singularity", "smooth_control"):
            pool, spec = _preset_pool(model, M, args.dt_fine, 1e-2, seed)
            rho_v, rho_phi = evaluate.radial_densities(pool)
            rows += evaluate.experiment_method_comparison(
                pool, spec, lambda b, s=spec: basismod.oracle_basis(s), [1e-2],
                ["selftest-lse"], M, 1, rho_v, rho_phi)
    elif args.preset == "cond-numbers":
        M = args.M or 2000
        for N in (5, 10, 20):
            pool, spec = _preset_pool("reference", M, args.dt_fine, 1e-2, seed, N=N)
            ns = selftest.assemble(pool, basismod.oracle_basis(spec), "riemann")
            kf, kvv, kpp, lmin, lmax = evaluate.condition_diagnostics(ns, 2)
            rows.append(dict(model="reference", method=f"cond(N={N})",
                             quadrature="riemann", dt_obs=1e-2, M=M, block="",
                             err_gradV=kvv, err_gradPhi=kpp,
                             **{"lambda": kf}, wall_time_s=""))
    elif args.preset == "nonradial-nn":
        M = args.M or 500
        pool, spec = _preset_pool("anisotropic", M, 1e-3, 1e-3, seed)
        cfg = nnmod.TrainConfig(seed=seed, epochs_max=args.epochs,
                                lr_V=1e-3, lr_Phi=2e-3)
        netV, netPhi, _ = nnmod.train(pool, cfg, mode="vector")
        pts_v = evaluate.draw_eval_points(pool, "V", 20000, seed)
        pts_p = evaluate.draw_eval_points(pool, "Phi", 20000, seed)
        ev = evaluate.vector_gradient_error(netV, spec, "V", pts_v)
        ep = evaluate.vector_gradient_error(netPhi, spec, "Phi", pts_p)
        rows.append(dict(model="anisotropic", method="selftest-nn", quadrature="",
                         dt_obs=1e-3, M=M, block=0, err_gradV=ev, err_gradPhi=ep,
                         **{"lambda": ""}, wall_time_s=""))
    else:
        raise SystemExit(
            f"config error: unknown value for field 'preset': {args.preset!r}")
    csv_path = os.path.join(args.out, f"{args.preset}.csv")
    evaluate.rows_to_csv(rows, csv_path)
    _write_manifest(args.out, "experiment",
                    {"preset": args.preset, "seed": seed}, [], [csv_path])
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ips",
                                description="Potential learning from unlabeled "
                                            "particle snapshots")
    p.add_argument("--threads", type=int, help="bound BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="generate a labeled snapshot dataset")
    ps.add_argument("--config", help="JSON config file (flags override)")
    ps.add_argument("--model", choices=models.FAMILIES)
    for name, default in SIM_FIELDS.items():
        if name == "model":
            continue
        ps.add_argument(f"--{name.replace('_', '-')}",
                        type=type(default), dest=name)
    ps.add_argument("--out", required=True)
    ps.set_defaults(fn=cmd_simulate)

    pt = sub.add_parser("strip", help="destroy particle labels by permutation")
    pt.add_argument("--data", required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", required=True)
    pt.set_defaults(fn=cmd_strip)

    pf = sub.add_parser("fit", help="fit potentials to a dataset")
    pf.add_argument("--data", required=True)
    pf.add_argument("--method", default="selftest-lse")
    pf.add_argument("--basis", default="oracle")
    pf.add_argument("--rbf-k", type=int, default=20)
    pf.add_argument("--quadrature", default="riemann")
    pf.add_argument("--seed", type=int, default=42)
    pf.add_argument("--epochs", type=int, default=200)
    pf.add_argument("--batch-size", type=int, default=256)
    pf.add_argument("--out", required=True)
    pf.set_defaults(fn=cmd_fit)

    pe = sub.add_parser("evaluate", help="score a fit against the ground truth")
    pe.add_argument("--data", required=True)
    pe.add_argument("--fit", required=True)
    pe.add_argument("--out", required=True)
    pe.set_defaults(fn=cmd_evaluate)

    px = sub.add_parser("experiment", help="run a named desk-scale experiment")
    px.add_argument("--preset", required=True)
    px.add_argument("--seed", type=int, default=42)
    px.add_argument("--M", type=int)
    px.add_argument("--trials", type=int, default=5)
    px.add_argument("--epochs", type=int, default=12)
    px.add_argument("--dt-fine", type=float, default=1e-3, dest="dt_fine")
    px.add_argument("--out", required=True)
    px.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    created = []
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        for path in created:
            if os.path.exists(path):
                os.remove(path)
        return 1


if __name__ == "__main__":
    sys.exit(main())
