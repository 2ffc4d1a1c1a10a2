"""Command-line entry point.

    steerfft train      --config cfg.json --out metrics.csv --checkpoint model.ckpt
    steerfft eval       --checkpoint model.ckpt
    steerfft sweep      --activation relu --pad 0,7,31,127 --out errors.csv
    steerfft gradcheck
    steerfft oracle     --degree 2 --coeffs 9 --out oracle.csv
    steerfft surfel-demo

Exit codes: 0 success, 1 validation failure (bad arguments or a failed check),
2 I/O error.
"""

import argparse
import csv
import json
import sys

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="JSON model/train config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pad", default=None, help="FFT padding (comma-separated list for sweep)")
    p.add_argument("--activation", default=None)
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.add_argument("--out", default=None, help="CSV output path")


def build_parser():
    parser = _Parser(prog="steerfft", description="Steerable point-cloud networks with FFT nonlinearities")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a classifier, write per-epoch metrics")
    _common(p)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--checkpoint", default=None, help="where to save the trained model")

    p = sub.add_parser("eval", help="test error of a saved model")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--n-test", type=int, default=None)

    p = sub.add_parser("sweep", help="per-layer equivariance errors to CSV")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--rotations", type=int, default=36)
    p.add_argument("--batch", type=int, default=32)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full layer stack")
    _common(p)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("oracle", help="FFT nonlinearity vs direct polynomial expansion")
    _common(p)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--coeffs", type=int, default=9)
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("surfel-demo", help="SO(3) invariance of a surfel conv on a sphere")
    _common(p)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--rotations", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _model_config(args, **defaults):
    from .model import desk_config, load_config

    train = {}
    if args.config:
        cfg, train = load_config(args.config)
    else:
        cfg = desk_config(**defaults)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.activation is not None:
        cfg.activation = args.activation
    if args.pad is not None and "," not in str(args.pad):
        cfg.pad = int(args.pad)
    cfg.validate()
    return cfg, train


def _pads(args, default):
    if args.pad is None:
        return list(default)
    return [int(v) for v in str(args.pad).split(",") if v.strip()]


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .model import SteerableNet
    from .train import TrainConfig, desk_train_config, train

    cfg, train_d = _model_config(args)
    tcfg = TrainConfig.from_dict(train_d) if train_d else desk_train_config()
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.seed is not None:
        tcfg.seed = args.seed
    tr, te = load_dataset(args.data_dir, args.n_train, args.n_test)
    model = SteerableNet(cfg, args.precision or "single")
    print(f"parameters: {model.num_parameters()}")
    result = train(model, tr, te, tcfg, metrics_path=args.out, log=print)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model, tcfg, {"final_test_error": result.final_test_error})
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .train import evaluate

    model, header = load_checkpoint(args.checkpoint)
    _, te = load_dataset(args.data_dir, 0, args.n_test)
    err = evaluate(model, te)
    print(f"test error {err:.4f} on {len(te)} images ({header['param_count']} parameters)")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows([["checkpoint", "n", "test_error"], [args.checkpoint, len(te), f"{err:.6f}"]])
    return EXIT_OK


def cmd_sweep(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .harness import equivariance_sweep
    from .model import SteerableNet

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if args.activation is not None and args.activation != model.config.activation:
            raise UsageError("--activation conflicts with the checkpoint")
    else:
        cfg, _ = _model_config(args)
        model = SteerableNet(cfg, args.precision or "single")
    _, te = load_dataset(args.data_dir, 0, args.batch)
    report = equivariance_sweep(model, te.images[: args.batch], args.rotations, _pads(args, [model.config.pad]), seed=model.config.seed)
    if args.out:
        report.to_csv(args.out)
    for r in report.records:
        print(f"layer {r.layer}  pad {r.pad:4d}  mean {r.mean_rel_err:.3e}  max {r.max_rel_err:.3e}")
    return EXIT_OK


def cmd_gradcheck(args):
    from . import autodiff as ad
    from .model import SteerableNet

    cfg, _ = _model_config(args, dropout=0.0)
    cfg.dropout = 0.0
    model = SteerableNet(cfg, "double")
    rng = np.random.default_rng(cfg.seed)
    images = rng.random((args.batch, cfg.image_size, cfg.image_size))
    labels = rng.integers(0, cfg.num_classes, args.batch)
    x = model.input_features(images)

    def loss_fn():
        tape = ad.Tape()
        return ad.log_softmax_nll(model.forward(tape, x, training=True), labels)

    report = ad.gradcheck(loss_fn, model.parameters(), samples=args.samples, rng=rng)
    for name, v in sorted(report.max_rel.items()):
        print(f"{name:24s} {v:.2e}")
    print(f"checked {report.checked}, skipped {report.skipped} (kinks), worst {report.worst:.2e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "max_rel_err"])
            for name, v in sorted(report.max_rel.items()):
                w.writerow([name, f"{v:.6e}"])
    return EXIT_OK if report.ok(args.tol) else EXIT_FAIL


def oracle_table(degree, coeffs, pads, trials=100, seed=0, dtype=np.float64):
    """Max relative deviation of apply_fft from the direct expansion, per pad."""
    from .activations import Activation, Polynomial, apply_fft, apply_poly_direct

    if coeffs % 2 == 0 or coeffs < 1:
        raise ValueError("coefficient count must be odd")
    K = (coeffs - 1) // 2
    rng = np.random.default_rng(seed)
    poly = Polynomial(tuple(rng.uniform(0.5, 1.5, degree + 1)))
    act = Activation("poly", poly=poly)
    z = rng.standard_normal((trials, K + 1)) + 1j * rng.standard_normal((trials, K + 1))
    z[:, 0] = z[:, 0].real
    z /= np.maximum(1.0, np.abs(z).sum(axis=1, keepdims=True))
    ref = apply_poly_direct(z, poly)
    ctype = np.complex64 if dtype == np.float32 else np.complex128
    rows = []
    for pad in pads:
        out = apply_fft(z.astype(ctype), act, pad)
        dev = np.abs(out - ref).max() / np.abs(ref).max()
        rows.append((pad, float(dev)))
    return rows


def cmd_oracle(args):
    from .activations import minimal_exact_pad

    K = (args.coeffs - 1) // 2
    exact = minimal_exact_pad(K, args.degree)
    dtype = np.float32 if args.precision == "single" else np.float64
    pads = _pads(args, range(0, exact + 1))
    rows = oracle_table(args.degree, args.coeffs, pads, args.trials, args.seed or 0, dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-11
    for pad, dev in rows:
        print(f"pad {pad:3d}  max rel deviation {dev:.3e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["degree", "coeffs", "pad", "max_rel_dev"])
            for pad, dev in rows:
                w.writerow([args.degree, args.coeffs, pad, f"{dev:.6e}"])
    at_exact = [d for p, d in rows if p >= exact]
    return EXIT_OK if all(d < tol for d in at_exact) else EXIT_FAIL


def surfel_invariance(points=200, rotations=20, seed=0, channels=4):
    """Max relative change of a conv2triv + point-average readout under random rotations.

    The input carries a scalar (z_0) and a tangent vector field (z_1) per surfel,
    so the check exercises frame alignment and the angular kernel terms.
    """
    from .conv2d import LayerParams
    from .surfel import StackFilterSpec, SurfelCloud, fibonacci_sphere, random_rotation, surfel_conv

    rng = np.random.default_rng(seed)
    pos, normals = fibonacci_sphere(points)
    spacing = np.sqrt(4 * np.pi / points)
    spec = StackFilterSpec.from_range(-spacing, spacing, spacing, spacing, spacing)
    layout = spec.layout(1, 0)
    params = LayerParams.init(layout, 1, channels, rng)
    a = rng.standard_normal(3)
    value = np.sin(3 * pos @ a) + pos[:, 2] ** 2
    grad = 3 * np.cos(3 * pos @ a)[:, None] * a + np.outer(2 * pos[:, 2], [0, 0, 1])

    def readout(R):
        cloud = SurfelCloud.from_normals(pos @ R.T, normals @ R.T)
        # the field moves with the surface; vectors are read off in each surfel's own frame
        g = grad @ R.T
        z = np.zeros((1, points, 1, 2), dtype=complex)
        z[0, :, 0, 0] = value
        z[0, :, 0, 1] = np.einsum("nd,nd->n", g, cloud.frames[:, 0]) + 1j * np.einsum("nd,nd->n", g, cloud.frames[:, 1])
        cloud.features = z
        out = surfel_conv(cloud, spec, params, cloud).features[..., 0].real
        return out.mean(axis=1)

    ref = readout(np.eye(3))
    worst = 0.0
    for _ in range(rotations):
        v = readout(random_rotation(rng))
        worst = max(worst, float(np.abs(v - ref).max() / np.abs(ref).max()))
    return worst


def cmd_surfel_demo(args):
    worst = surfel_invariance(args.points, args.rotations, args.seed or 0)
    print(f"max relative deviation over {args.rotations} rotations: {worst:.3e}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh).writerows([["points", "rotations", "max_rel_dev"], [args.points, args.rotations, f"{worst:.6e}"]])
    return EXIT_OK if worst < args.tol else EXIT_FAIL


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
    "surfel-demo": cmd_surfel_demo,
}


def main(argv=None):
    from .checkpoint import CheckpointError
    from .data import AmatFormatError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return EXIT_FAIL
        return COMMANDS[args.command](args)
    except UsageError:
        return EXIT_FAIL
    except (OSError, json.JSONDecodeError, CheckpointError, AmatFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
