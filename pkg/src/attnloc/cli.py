"""Command-line front door.

Subcommands: localize, reward, eval, train-toy, gen-synth, validate.
Results go to files or single-line JSON on stdout; diagnostics go to stderr.
Exit codes: 0 success, 2 usage, and one documented code per error family
(see errors.EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .consistency import ConsistencyConfig, evaluate_consistency
from .dump import read_dump, read_f32_map, reduce_per_layer
from .errors import AttnlocError, MissingFile, exit_code_for
from .heatmap import build_anomaly_map, export_map
from .rl import ToyEnvConfig, TrainConfig, accuracy_reward, parse_response, train_toy
from .scoring import FILTER_BOTH, FILTER_MODES, ScoringConfig, score_reasoning_tokens
from .synth import SynthSpec, generate, plant_report


def _add_scoring_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--q-bin", type=float, default=0.90, help="binarization quantile for spatial entropy (default 0.90)")
    p.add_argument("--alpha", type=float, default=0.5, help="semantic score weight; spatial weight is 1-alpha (default 0.5)")
    p.add_argument("--tau-t-rule", default="median", help="semantic threshold rule: median, max_curvature, or a fixed value (default median)")
    p.add_argument("--tau-i-rule", default="max_curvature", help="spatial threshold rule: median, max_curvature, or a fixed value (default max_curvature)")
    p.add_argument("--filter-mode", default=FILTER_BOTH, choices=FILTER_MODES, help="token filter variant (default both)")


def _add_consistency_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=3, help="top-k tokens for the consensus support (default 3)")
    p.add_argument("--delta1", type=float, default=0.3, help="consensus threshold for anomalous images (default 0.3)")
    p.add_argument("--delta2", type=float, default=0.1, help="consensus threshold for normal images (default 0.1)")
    p.add_argument("--support-quantile", type=float, default=0.95, help="support binarization quantile (default 0.95)")


def _parse_rule(text: str) -> str | float:
    try:
        return float(text)
    except ValueError:
        return text


def _scoring_config(args: argparse.Namespace) -> ScoringConfig:
    return ScoringConfig(
        alpha=args.alpha,
        beta=1.0 - args.alpha,
        binarize_quantile=args.q_bin,
        tau_t_rule=_parse_rule(args.tau_t_rule),
        tau_i_rule=_parse_rule(args.tau_i_rule),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_loc = sub.add_parser("localize", help="compute the anomaly map for one dump directory")
    p_loc.add_argument("dump_dir")
    p_loc.add_argument("out_dir")
    _add_scoring_flags(p_loc)
    p_loc.add_argument("--blur-sigma", type=float, default=0.0, help="Gaussian blur sigma in pixels, 0 disables (default 0)")

    p_rew = sub.add_parser("reward", help="compute the reward bundle for one dump directory")
    p_rew.add_argument("dump_dir")
    _add_scoring_flags(p_rew)
    _add_consistency_flags(p_rew)

    p_eval = sub.add_parser("eval", help="aggregate metrics over a prediction/truth corpus")
    p_eval.add_argument("--pred", required=True, help="directory of per-sample localize outputs")
    p_eval.add_argument("--truth", required=True, help="corpus directory of dumps (gen-synth layout)")
    p_eval.add_argument("--pixel", action="store_true", help="also compute pixel-level metrics from masks")
    p_eval.add_argument("--pixel-threshold", type=float, default=0.5, help="map threshold for pixel accuracy (default 0.5)")

    p_train = sub.add_parser("train-toy", help="run toy group-policy training")
    p_train.add_argument("--steps", type=int, default=500)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument("--group-size", "-G", type=int, default=8, help="rollouts per group (default 8)")
    p_train.add_argument("--clip-eps", type=float, default=0.2, help="surrogate clip range (default 0.2)")
    p_train.add_argument("--kl-coeff", type=float, default=0.04, help="KL penalty weight (default 0.04)")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", default="-", help="trace JSONL path, - for stdout (default -)")
    _add_consistency_flags(p_train)

    p_gen = sub.add_parser("gen-synth", help="generate a synthetic dump corpus")
    p_gen.add_argument("out_dir")
    p_gen.add_argument("--n-samples", type=int, default=20)
    p_gen.add_argument("--patch-grid-side", "-P", type=int, default=15)
    p_gen.add_argument("--image-size", type=int, default=420, help="square image side in pixels (default 420)")
    p_gen.add_argument("--anomaly-fraction", type=float, default=0.5)
    p_gen.add_argument("--tokens-per-response", type=int, default=8)
    p_gen.add_argument("--n-focused", type=int, default=3)
    p_gen.add_argument("--focus-mass", type=float, default=0.9)
    p_gen.add_argument("--noise-level", type=float, default=0.05)
    p_gen.add_argument("--seed", type=int, default=0)

    p_val = sub.add_parser("validate", help="validate one dump directory")
    p_val.add_argument("dump_dir")

    return parser


def _cmd_localize(args: argparse.Namespace) -> int:
    manifest, record, _ = read_dump(args.dump_dir)
    record = reduce_per_layer(manifest, record)  # scoring expects aggregated rows
    config = _scoring_config(args)
    scores = score_reasoning_tokens(record, manifest, config, filter_mode=args.filter_mode)
    amap = build_anomaly_map(scores.tokens, record, manifest, blur_sigma=args.blur_sigma)
    params = {
        "q_bin": args.q_bin,
        "alpha": args.alpha,
        "beta": 1.0 - args.alpha,
        "tau_t_rule": args.tau_t_rule,
        "tau_i_rule": args.tau_i_rule,
        "filter_mode": args.filter_mode,
        "blur_sigma": args.blur_sigma,
        "sample_id": manifest.sample_id,
        "label": manifest.label,
    }
    export_map(amap, args.out_dir, params=params)
    score_rows = [
        {
            "token_index": t.token_index,
            "s_t": t.s_t,
            "s_i": t.s_i,
            "s_t_hat": t.s_t_hat,
            "s_i_hat": t.s_i_hat,
            "passes": t.passes,
            "weight": t.weight,
        }
        for t in scores.tokens
    ]
    scores_doc = {
        "sample_id": manifest.sample_id,
        "tau_t": scores.tau_t,
        "tau_i": scores.tau_i,
        "degenerate_t": scores.degenerate_t,
        "degenerate_i": scores.degenerate_i,
        "tokens": score_rows,
    }
    (Path(args.out_dir) / "scores.json").write_text(json.dumps(scores_doc, indent=2), encoding="utf-8")
    print(json.dumps({"out_dir": args.out_dir, "fallback_used": amap.fallback_used, "image_score": amap.image_score}))
    return 0


def _cmd_reward(args: argparse.Namespace) -> int:
    manifest, record, _ = read_dump(args.dump_dir)
    record = reduce_per_layer(manifest, record)
    parsed = parse_response(manifest.answer_text)
    r_fmt = int(parsed is not None)
    answer = parsed[1] if parsed else None
    r_acc = accuracy_reward(answer, manifest.label)
    jac = 0.0
    r_cons = 0
    if parsed is not None:
        scores = score_reasoning_tokens(record, manifest, _scoring_config(args), filter_mode=args.filter_mode)
        outcome = evaluate_consistency(
            scores.tokens,
            record,
            manifest,
            ConsistencyConfig(
                k=args.k,
                delta1=args.delta1,
                delta2=args.delta2,
                support_quantile=args.support_quantile,
            ),
        )
        jac = outcome.jaccard
        r_cons = outcome.reward
    print(
        json.dumps(
            {
                "r_fmt": r_fmt,
                "r_acc": r_acc,
                "r_cons": r_cons,
                "jaccard": jac,
                "total": r_fmt + r_acc + r_cons,
            }
        )
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    truth_rows = plant_report(args.truth)
    image_scores: list[float] = []
    image_labels: list[int] = []
    answer_scores: list[float] = []
    rouge_scores: list[float] = []
    pixel_maps: list[np.ndarray] = []
    pixel_masks: list[np.ndarray] = []
    for row in truth_rows:
        sample_id = row["sample_id"]
        manifest, _, mask = read_dump(Path(args.truth) / sample_id)
        pred_dir = Path(args.pred) / sample_id
        sidecar_path = pred_dir / "map.json"
        if not sidecar_path.is_file():
            raise MissingFile(f"map.json: {sidecar_path} not found")
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        image_scores.append(float(sidecar["image_score"]))
        image_labels.append(manifest.label)
        parsed = parse_response(manifest.answer_text)
        answer_scores.append(1.0 if parsed is not None and parsed[1] == "Yes" else 0.0)
        reference = row.get("reference_reasoning")
        if reference and parsed is not None:
            rouge_scores.append(metrics.rouge_l(parsed[0], reference))
        if args.pixel:
            if mask is None:
                raise MissingFile(f"mask.pgm: sample {sample_id} has no mask but --pixel was requested")
            pixel_maps.append(read_f32_map(pred_dir / "map.f32", sidecar["height"], sidecar["width"]))
            pixel_masks.append(mask)
    report: dict = {
        "n_samples": len(truth_rows),
        "image": {
            "auroc": metrics.auroc(image_scores, image_labels),
            "aupr": metrics.aupr(image_scores, image_labels),
            "acc": metrics.accuracy(answer_scores, image_labels, 0.5),
        },
        "pixel": None,
        "reasoning": {"rouge_l": float(np.mean(rouge_scores))} if rouge_scores else None,
    }
    if args.pixel:
        # pooled over every pixel of every sample
        flat_scores = np.concatenate([m.ravel() for m in pixel_maps])
        flat_labels = np.concatenate([m.ravel() for m in pixel_masks]).astype(int)
        report["pixel"] = {
            "auroc": metrics.auroc(flat_scores, flat_labels),
            "aupr": metrics.aupr(flat_scores, flat_labels),
            "acc": metrics.accuracy(flat_scores, flat_labels, args.pixel_threshold),
        }
    print(json.dumps(report))
    return 0


def _cmd_train_toy(args: argparse.Namespace) -> int:
    config = TrainConfig(
        steps=args.steps,
        lr=args.lr,
        group_size=args.group_size,
        seed=args.seed,
        clip_eps=args.clip_eps,
        kl_coeff=args.kl_coeff,
        env=ToyEnvConfig(
            k=args.k,
            delta1=args.delta1,
            delta2=args.delta2,
            support_quantile=args.support_quantile,
        ),
    )
    trace = train_toy(config)
    lines = "\n".join(json.dumps(rec) for rec in trace)
    if args.out == "-":
        print(lines)
    else:
        Path(args.out).write_text(lines + "\n", encoding="utf-8")
        print(json.dumps({"out": args.out, "steps": args.steps, "final_theta": trace[-1]["theta"]}))
    return 0


def _cmd_gen_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        patch_grid_side=args.patch_grid_side,
        image_height=args.image_size,
        image_width=args.image_size,
        n_samples=args.n_samples,
        anomaly_fraction=args.anomaly_fraction,
        tokens_per_response=args.tokens_per_response,
        n_focused=args.n_focused,
        focus_mass=args.focus_mass,
        noise_level=args.noise_level,
        seed=args.seed,
    )
    rows = generate(spec, args.out_dir)
    print(json.dumps({"out_dir": args.out_dir, "n_samples": len(rows)}))
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    manifest, _, _ = read_dump(args.dump_dir)
    print(json.dumps({"sample_id": manifest.sample_id, "valid": True}))
    return 0


_HANDLERS = {
    "localize": _cmd_localize,
    "reward": _cmd_reward,
    "eval": _cmd_eval,
    "train-toy": _cmd_train_toy,
    "gen-synth": _cmd_gen_synth,
    "validate": _cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except AttnlocError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())
