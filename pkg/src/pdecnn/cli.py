"""Command-line interface: ``pdecnn <verb> [options]``.

Verbs: ``train``, ``eval``, ``analyze``, ``check-grad``, ``derive-pde`` and
``weights``. Tables go to stdout; ``--out DIR`` additionally writes CSV files.
All randomness is derived from ``--seed``. Exit status: 0 success, 1 runtime
failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import analysis as A
from . import config as C
from .adjoint import network_fd_check
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import SymLayerWeights
from .conv import ConvBlock
from .network import Network, WeightVector, cifar100_spec, cifar10_spec, count_weights, init_weights, stl10_spec
from .pde_map import NAMES_1D, NAMES_2D, theta_to_beta_1d, theta_to_beta_2d
from .tensor import make_rng
from . import training as T

log = logging.getLogger("pdecnn")


# --- output helpers ------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(empty)"
    cols = list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def write_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})


def _emit(args, name: str, rows: list[dict], title: str | None = None) -> None:
    if title:
        print(title)
    print(format_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, f"{name}.csv"), rows)


# --- verbs -------------------------------------------------------------------

def cmd_train(args) -> int:
    exp = C.load(args.config, args.seed, args.data)
    data = C.load_dataset(exp.data, exp.train.seed)
    ckpt = args.checkpoint or (os.path.join(args.out, "checkpoint.ckpt") if args.out else None)
    state = None
    if args.resume:
        if not ckpt or not os.path.exists(ckpt):
            raise FileNotFoundError(f"--resume needs an existing checkpoint, got {ckpt!r}")
        state = T.state_from_checkpoint(load_checkpoint(ckpt))
    if args.out:
        os.makedirs(args.out, exist_ok=True)

    def on_epoch(st):
        if ckpt:
            save_checkpoint(T.state_to_checkpoint(st, exp.train, exp.reg, data), ckpt)

    _, history, state = T.train(data, exp.spec, exp.train, exp.reg, state, on_epoch, args.stop_after)
    _emit(args, "history", history, f"# {exp.spec.family} on {data.name}, {exp.spec.widths}, "
                                    f"{state.net.weights.size} weights")
    if state.best_weights is not None and len(data.y_test):
        net = T.best_network(state)
        cm = A.confusion_matrix(net, data.x_test, data.y_test)
        print(f"best epoch {state.best_epoch}: val acc {state.best_acc:.4f}; "
              f"test acc {cm.accuracy:.4f} (loss {cm.loss:.4f})")
    return 0


def _network_from_args(args, exp) -> Network:
    if args.checkpoint:
        st = T.state_from_checkpoint(load_checkpoint(args.checkpoint))
        return T.best_network(st) if st.best_weights is not None and not args.last else st.net
    seed = exp.train.seed
    if args.init == "zero":
        w = init_weights(exp.spec, make_rng(seed)).zeros_like()
        return Network(exp.spec, WeightVector(w))
    return Network.create(exp.spec, seed)


def cmd_eval(args) -> int:
    exp = C.load(args.config, args.seed, args.data)
    data = C.load_dataset(exp.data, exp.train.seed)
    net = _network_from_args(args, exp)
    cm = A.confusion_matrix(net, data.x_test, data.y_test)
    rows = list(cm.rows())
    _emit(args, "confusion", rows, "# confusion matrix (rows: true class, columns: predicted)")
    summary = [{"split": "test", "n": len(data.y_test), "accuracy": cm.accuracy, "loss": cm.loss}]
    _emit(args, "eval", summary)
    return 0


def cmd_analyze(args) -> int:
    exp = C.load(args.config, args.seed, args.data)
    rng = make_rng(exp.train.seed)
    if args.mode == "energy":
        c = exp.spec.widths[0]
        k = np.clip(rng.standard_normal((c, c, 3, 3)) * 0.5, -1, 1)
        w = SymLayerWeights(ConvBlock(k))
        y0 = rng.standard_normal((args.batch, c, exp.spec.image_size, exp.spec.image_size))
        dt = args.dt or A.admissible_dt(w, y0.shape) / 2
        tr = A.energy_trace(w, y0, args.steps, dt, "tanh")
        rows = list(tr.rows())
        _emit(args, "energy", rows, f"# second-order energy, tanh, dt={dt:.6g}")
        return 0
    data = C.load_dataset(exp.data, exp.train.seed)
    net = _network_from_args(args, exp)
    if args.mode == "confusion":
        cm = A.confusion_matrix(net, data.x_test, data.y_test)
        _emit(args, "confusion", list(cm.rows()), f"# accuracy {cm.accuracy:.4f} loss {cm.loss:.4f}")
        return 0
    x = data.x_test[:args.batch] if len(data.y_test) else data.x_train[:args.batch]
    if args.mode == "stability":
        rep = A.perturbation_stability(net, x, args.noise, args.trials, rng, args.block,
                                       spectra=args.spectra)
        _emit(args, "stability", list(rep.rows()),
              f"# empirical M at horizon T={rep.horizon:g}: {rep.max_ratio:.12g}")
        if rep.step_eigenvalues:
            rows = [{"step": j, "lambda_min": lam, "margin": m}
                    for j, (lam, m) in enumerate(zip(rep.step_eigenvalues, rep.bound_margin))]
            _emit(args, "spectrum", rows, "# per-step Jacobian spectrum")
        return 0
    if args.mode == "spectrum":
        rows = []
        from .layers import conv_bn_relu_forward
        y, _ = conv_bn_relu_forward(net.conv_bn_weights("open"), x, "eval")
        s = net.spec
        for b in range(len(s.widths)):
            traj = net.run_block(b, y, store=True)
            for j, w in enumerate(net.block_weights(b)):
                if s.family == "hamiltonian":
                    pairs = [("y", w[0], traj.zs[j]), ("z", w[1], traj.ys[j + 1])]
                else:
                    pairs = [("", w, traj.ys[j])]
                for tag, lw, state in pairs:
                    est = A.jacobian_spectrum(lw, state, act=s.activation, eps=s.tv_eps)
                    rows.append({"block": b, "step": j, "layer": tag or "-", "eigenvalue": est.eigenvalue,
                                 "residual": est.residual, "converged": est.converged})
            y, _ = conv_bn_relu_forward(net.conv_bn_weights(f"conn{b}"), net.block_output(traj), "eval",
                                        pool=b < len(s.widths) - 1)
        _emit(args, "spectrum", rows, "# leading Jacobian eigenvalue per layer")
        return 0
    raise ValueError(f"unknown analysis mode {args.mode!r}")


def cmd_check_grad(args) -> int:
    exp = C.load(args.config, args.seed, args.data)
    rng = make_rng(exp.train.seed)
    net = Network.create(exp.spec, exp.train.seed)
    # move off the ReLU kinks that zero biases put the freshly initialized net on
    for k in net.weights:
        if k.startswith("cls.") or k.endswith("norm.bias"):
            net.weights[k][...] = 0.1 * rng.standard_normal(net.weights[k].shape)
    s = exp.spec
    x = rng.standard_normal((args.batch, s.in_channels, s.image_size, s.image_size))
    labels = rng.integers(0, s.n_classes, args.batch)
    rep = network_fd_check(net, x, labels, rng, args.h, args.strategy, per_group=True)
    print(f"# gradient check: {s.family}, strategy {args.strategy}")
    print("\n".join(rep.lines()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rows = [{"group": "all", "rel_error": rep.rel_error}]
        rows += [{"group": k, "rel_error": v} for k, v in rep.groups.items()]
        write_csv(os.path.join(args.out, "check_grad.csv"), rows)
    # per-group errors are diagnostics: a group with a tiny directional derivative
    # near a ReLU kink can exceed the tolerance without any gradient error
    return 0 if rep.rel_error <= args.tol else 1


def cmd_derive_pde(args) -> int:
    theta = [float(v) for v in args.stencil.replace(";", ",").split(",") if v.strip()]
    if len(theta) == 3:
        c = theta_to_beta_1d(theta, args.h)
        names = NAMES_1D
    elif len(theta) == 9:
        c = theta_to_beta_2d(np.array(theta).reshape(3, 3), args.h)
        names = NAMES_2D
    else:
        raise ValueError(f"stencil needs 3 or 9 values, got {len(theta)}")
    rows = [{"coefficient": f"beta{i + 1}", "operator": n, "value": float(v) + 0.0}
            for i, (n, v) in enumerate(zip(names, c.beta))]
    _emit(args, "pde", rows, f"# h = {args.h:g}")
    return 0


def cmd_weights(args) -> int:
    rows = []
    for name, make in (("STL-10", stl10_spec), ("CIFAR-10", cifar10_spec), ("CIFAR-100", cifar100_spec)):
        for fam in ("parabolic", "hamiltonian", "second_order"):
            spec = make(fam)
            rows.append({"dataset": name, "family": fam, "weights": count_weights(spec)})
    _emit(args, "weights", rows)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdecnn", description="PDE-inspired residual CNNs")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON experiment file")
        sp.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        sp.add_argument("--data", help="dataset directory (overrides data.path)")
        sp.add_argument("--checkpoint", help="checkpoint file")
        sp.add_argument("--out", help="directory for CSV outputs")

    sp = sub.add_parser("train", help="train a network")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    sp.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs in total")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test accuracy, loss and confusion matrix")
    common(sp)
    sp.add_argument("--init", choices=("random", "zero"), default="random")
    sp.add_argument("--last", action="store_true", help="use final rather than best-validation weights")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="stability, spectrum, energy or confusion diagnostics")
    common(sp)
    sp.add_argument("--mode", choices=("stability", "spectrum", "energy", "confusion"), required=True)
    sp.add_argument("--init", choices=("random", "zero"), default="random",
                    help="weights when no checkpoint is given")
    sp.add_argument("--last", action="store_true")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--noise", type=float, default=1e-3, help="Frobenius norm of each perturbation")
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--block", type=int, default=None)
    sp.add_argument("--spectra", action="store_true", help="also estimate per-step Jacobian spectra")
    sp.add_argument("--steps", type=int, default=64, help="time steps for --mode energy")
    sp.add_argument("--dt", type=float, default=None, help="step size for --mode energy")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("check-grad", help="finite-difference check of the network gradient")
    common(sp)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--strategy", choices=("stored", "reversible"), default="stored")
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(func=cmd_check_grad)

    sp = sub.add_parser("derive-pde", help="differential-operator coefficients of a stencil")
    sp.add_argument("--stencil", required=True, help="3 or 9 comma-separated values (row-major)")
    sp.add_argument("--h", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_derive_pde)

    sp = sub.add_parser("weights", help="trainable weight counts of the reference architectures")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_weights)
    return p


def _join_negative_values(argv: list[str]) -> list[str]:
    # "--stencil -1,2,-1" would otherwise be read as an option
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--stencil":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"--stencil={nxt}")
        else:
            out.append(tok)
    return out


def _seed_from_checkpoint(args) -> None:
    # evaluate on the same data split the checkpoint was trained with
    if getattr(args, "checkpoint", None) and args.seed is None and args.verb in ("eval", "analyze"):
        args.seed = load_checkpoint(args.checkpoint).train_config.get("seed")


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        _seed_from_checkpoint(args)
        return args.func(args)
    except (ValueError, OSError, KeyError, C.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
