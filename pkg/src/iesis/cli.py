"""Command-line entry point.

::

    iesis run --config PATH [--seed N] [--out DIR]
    iesis oracle --config PATH
    iesis describe EXPERIMENT

Exit codes: 0 on success, 2 on validation errors, 3 on solver failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateError, SolverError, ValidationError
from .experiments import (KINDS, config_from_dict, default_config, generate_synthetic_data,
                          linear_posterior, load_config, run)
from .gmm import GaussianMixture
from .oracle import (LinearModel, linear_gmm_posterior, log_marginal_weights,
                     log_weights_determinant_form)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = run(cfg, output_dir=args.out, seed=args.seed)
    final = out.series[-1]
    summary = {k: final[k] for k in ("iteration", "error_theta", "field_error", "dimension")
               if k in final}
    summary["converged"] = out.result.converged
    summary["output_dir"] = str(out.output_dir) if out.output_dir else None
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _oracle_mixture(raw: dict) -> GaussianMixture:
    means = np.atleast_2d(np.asarray(raw["means"], dtype=float))
    covs = np.asarray(raw["covs"], dtype=float)
    if covs.ndim == 1:
        covs = covs[:, None, None]
    return GaussianMixture(np.asarray(raw["weights"], dtype=float), means, covs)


def _cmd_oracle(args) -> int:
    """Closed-form posterior for a linear problem.

    The config is either an experiment config of kind ``custom_linear`` or an
    explicit problem ``{"G": ..., "c_d": ..., "d": ..., "prior": {"weights",
    "means", "covs"}}``.
    """
    with open(args.config) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValidationError("oracle config must be a JSON object")
    if "kind" in raw:
        cfg = config_from_dict(raw)
        if cfg.kind != "custom_linear":
            raise ValidationError("kind: the oracle applies to custom_linear configs only")
        obs = generate_synthetic_data(cfg)
        post = linear_posterior(cfg, obs)
        report = {"data": obs.d.tolist()}
    else:
        unknown = sorted(set(raw) - {"G", "c_d", "d", "prior"})
        if unknown:
            raise ValidationError(f"unknown oracle keys: {', '.join(unknown)}")
        model = LinearModel(np.atleast_2d(np.asarray(raw["G"], dtype=float)),
                            np.atleast_2d(np.asarray(raw["c_d"], dtype=float)))
        prior = _oracle_mixture(raw["prior"])
        d = np.atleast_1d(np.asarray(raw["d"], dtype=float))
        post = linear_gmm_posterior(model, d, prior)
        # the two forms agree up to a constant shared by all components
        a = log_marginal_weights(model, d, prior)
        b = log_weights_determinant_form(model, d, prior)
        diff = (a - logsumexp(a)) - (b - logsumexp(b))
        report = {"log_weight_forms_max_diff": float(np.max(np.abs(diff)))}
    report.update(weights=post.weights.tolist(), means=post.means.tolist(),
                  covs=post.covs.tolist(), mean=post.mean().tolist())
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _cmd_describe(args) -> int:
    print(json.dumps(default_config(args.experiment).to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iesis", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a twin experiment")
    r.add_argument("--config", required=True, help="JSON experiment config")
    r.add_argument("--seed", type=int, default=None, help="override the master seed")
    r.add_argument("--out", default=None, help="output directory")
    r.set_defaults(func=_cmd_run)

    o = sub.add_parser("oracle", help="closed-form posterior of a linear problem")
    o.add_argument("--config", required=True)
    o.set_defaults(func=_cmd_oracle)

    d = sub.add_parser("describe", help="print the resolved defaults of an experiment")
    d.add_argument("experiment", choices=KINDS)
    d.set_defaults(func=_cmd_describe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, DegenerateError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (KeyError, TypeError, ValueError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
