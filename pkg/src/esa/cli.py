"""Experiment driver: calibrate, train, eval-recall, run, needle, analyze.

Artifacts land in --out-dir: binary dumps and projections, CSV/JSONL traces
with a config-hash header line, JSON summaries, and PNG figures next to each
delimited report. Every command is deterministic for a fixed seed. Exit codes:
0 success, 2 configuration error, 3 malformed artifact file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import formats, plots
from .analysis import (
    CostModel,
    cache_overhead_ratio,
    esa_flops,
    full_attention_flops,
    reduction_ratio_asymptotic,
    reduction_ratio_exact,
)
from .compression import TrainConfig, pca_projections, recall_at_k, train_projections
from .engine import EsaConfig, EsaEngine, OracleEngine, planted_needle_recall
from .errors import ConfigurationError, FormatError
from .toy import ToyModel, ToyModelSpec


@dataclass(frozen=True)
class ExperimentConfig:
    """Full experiment description; round-trips losslessly through JSON."""

    esa: EsaConfig
    toy: ToyModelSpec
    corpus_len: int = 5000
    h_g: int | None = None  # grouped-query heads for the cache-overhead formula

    def to_dict(self) -> dict:
        return {
            "esa": dataclasses.asdict(self.esa),
            "toy": dataclasses.asdict(self.toy),
            "corpus_len": self.corpus_len,
            "h_g": self.h_g,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            return cls(
                esa=EsaConfig(**doc["esa"]),
                toy=ToyModelSpec(**doc["toy"]),
                corpus_len=int(doc["corpus_len"]),
                h_g=None if doc.get("h_g") is None else int(doc["h_g"]),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad experiment config: {exc}") from exc

    @property
    def config_hash(self) -> str:
        return formats.config_hash(self.to_dict())


def _preset(name: str) -> ExperimentConfig:
    if name == "large":
        return ExperimentConfig(
            esa=EsaConfig.large(),
            toy=ToyModelSpec(layers=4, h=32, d=128),
            corpus_len=50000,
            h_g=8,
        )
    if name == "desk":
        return ExperimentConfig(esa=EsaConfig.desk(), toy=ToyModelSpec(), corpus_len=5000, h_g=4)
    if name == "default":
        return ExperimentConfig(esa=EsaConfig.desk(), toy=ToyModelSpec(), corpus_len=50000, h_g=4)
    raise ConfigurationError(f"unknown preset {name!r}")


def _resolve_config(args) -> ExperimentConfig:
    cfg = _preset(args.preset or "default")
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON ({exc})") from exc
        cfg = ExperimentConfig.from_dict(doc)
    esa = cfg.esa
    if args.dprime is not None:
        esa = replace(esa, d_prime=args.dprime)
    if getattr(args, "chunk", None) is not None:
        esa = replace(esa, chunk=args.chunk)
    toy = cfg.toy
    if args.seed is not None:
        toy = replace(toy, seed=args.seed)
    if getattr(args, "hg", None) is not None:
        cfg = replace(cfg, h_g=args.hg)
    return replace(cfg, esa=esa, toy=toy)


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigurationError("this command needs --out-dir")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_int(text, flag: str) -> int | None:
    if text is None:
        return None
    values = _int_list(str(text), flag)
    if len(values) != 1:
        raise ConfigurationError(f"{flag} expects one integer here, got {text!r}")
    return values[0]


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError as exc:
        raise ConfigurationError(f"{flag} expects comma-separated integers, got {text!r}") from exc


def _calib_path(out: Path, layer: int) -> Path:
    return out / f"calib_layer{layer}.bin"


def _proj_path(out: Path, layer: int) -> Path:
    return out / f"proj_layer{layer}.bin"


def cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    length = args.length or cfg.corpus_len
    cfg = replace(cfg, corpus_len=length)
    model = ToyModel(cfg.toy)
    ids = model.tokens(length)

    def one(layer: int) -> str:
        q, k, _ = model.features(ids, layer)
        from .compression import CalibrationSet

        calib = CalibrationSet(layer_index=layer, queries=q, keys=k, source="toy-corpus")
        path = _calib_path(out, layer)
        formats.write_calibration(path, calib)
        return str(path)

    with ThreadPoolExecutor(max_workers=min(8, cfg.toy.layers)) as pool:
        paths = list(pool.map(one, range(cfg.toy.layers)))
    formats.write_manifest(
        out / "manifest.json",
        seeds={"toy": cfg.toy.seed},
        config=cfg.to_dict(),
        artifacts={
            "calibration": paths,
            "corpus": f"toy synthetic corpus, {length} tokens, seeded motifs over skewed ids",
        },
    )
    print(f"calibrate: wrote {len(paths)} layer dumps ({length} pairs each) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    hyper_base = TrainConfig()

    def one(layer: int):
        calib = formats.read_calibration(_calib_path(out, layer))
        hyper = replace(hyper_base, seed=cfg.toy.seed + layer)
        pair, report = train_projections(calib, cfg.esa.d_prime, hyper)
        formats.write_projection(_proj_path(out, layer), pair)
        return layer, report

    with ThreadPoolExecutor(max_workers=min(8, cfg.toy.layers)) as pool:
        reports = dict(pool.map(one, range(cfg.toy.layers)))
    doc = {
        "config_hash": cfg.config_hash,
        "d_prime": cfg.esa.d_prime,
        "layers": {
            str(layer): {
                "epoch_losses": rep.epoch_losses,
                "final_loss": rep.final_loss,
                "steps": rep.steps,
            }
            for layer, rep in sorted(reports.items())
        },
    }
    (out / "train_report.json").write_text(json.dumps(doc, indent=2) + "\n")
    plots.plot_training_loss(
        {layer: rep.epoch_losses for layer, rep in reports.items()}, out / "training_loss.png"
    )
    losses = ", ".join(f"L{layer}={rep.final_loss:.4f}" for layer, rep in sorted(reports.items()))
    print(f"train: d'={cfg.esa.d_prime}, final losses {losses}")
    return 0


def _eval_slices(args, length: int) -> tuple[int, int, int]:
    spec = args.eval_keys or "2000:4000"
    try:
        lo, hi = (int(p) for p in spec.split(":"))
    except ValueError as exc:
        raise ConfigurationError(f"--eval-keys expects A:B, got {spec!r}") from exc
    n_q = args.eval_queries or 500
    if not (0 <= lo < hi <= length) or hi + n_q > length:
        raise ConfigurationError(
            f"evaluation slice keys [{lo}:{hi}] plus {n_q} queries exceeds corpus length {length}"
        )
    return lo, hi, n_q


def cmd_eval_recall(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    modes = (args.mode or "learned,pca").split(",")
    k = _single_int(args.k, "--k") or 200
    rows: list[dict] = []

    def one(layer: int) -> list[dict]:
        calib = formats.read_calibration(_calib_path(out, layer))
        lo, hi, n_q = _eval_slices(args, calib.size)
        queries = calib.queries[hi : hi + n_q]
        keys = calib.keys[lo:hi]
        if k > keys.shape[0]:
            raise ConfigurationError(f"k={k} exceeds {keys.shape[0]} candidate keys")
        got = []
        for mode in modes:
            if mode == "learned":
                pair = formats.read_projection(_proj_path(out, layer))
            elif mode == "pca":
                pair = pca_projections(calib, cfg.esa.d_prime)
            elif mode == "pca-joint":
                pair = pca_projections(calib, cfg.esa.d_prime, joint=True)
            else:
                raise ConfigurationError(f"unknown eval mode {mode!r}")
            got.append(
                {"layer": layer, "mode": mode, "k": k, "recall": recall_at_k(queries, keys, pair, k)}
            )
        return got

    with ThreadPoolExecutor(max_workers=min(8, cfg.toy.layers)) as pool:
        for chunk_rows in pool.map(one, range(cfg.toy.layers)):
            rows.extend(chunk_rows)

    csv_path = out / "recall.csv"
    with open(csv_path, "w") as f:
        f.write(f"# config {cfg.config_hash}\n")
        f.write("layer,mode,k,recall\n")
        for r in sorted(rows, key=lambda r: (r["mode"], r["layer"])):
            f.write(f"{r['layer']},{r['mode']},{r['k']},{r['recall']:.6f}\n")
    plots.plot_recall_by_layer(rows, out / "recall.png")
    for mode in modes:
        vals = [r["recall"] for r in rows if r["mode"] == mode]
        print(f"eval-recall: mode={mode} k={k} mean={np.mean(vals):.4f} min={min(vals):.4f}")
    return 0


def _chunk_sizes(length: int, chunk: int) -> list[int]:
    # Remainder first, so later chunk boundaries land on multiples of `chunk`
    # and sweeps can measure full-size steps at exact middle lengths.
    if length <= 0:
        return []
    rem = length % chunk
    sizes = [rem] if rem else []
    sizes.extend([chunk] * (length // chunk))
    return sizes


def _build_engine(
    mode: str, cfg: ExperimentConfig, layer: int, out: Path,
    basis: str | None, head_mode: str | None = None,
):
    esa = cfg.esa
    if basis:
        esa = replace(esa, scoring_basis=basis)
    if head_mode:
        esa = replace(esa, head_mode=head_mode)
    if mode == "oracle":
        return OracleEngine(esa, layer_index=layer)
    if mode == "identity-esa":
        from .compression import identity_projections

        esa = replace(esa, d_prime=esa.d_h)
        return EsaEngine(esa, identity_projections(esa.d_h, layer), layer_index=layer)
    if mode == "esa":
        if esa.scoring_basis == "full_dim":
            from .compression import identity_projections

            esa = replace(esa, d_prime=esa.d_h)
            return EsaEngine(esa, identity_projections(esa.d_h, layer), layer_index=layer)
        path = _proj_path(out, layer)
        if not path.exists():
            raise ConfigurationError(f"no projection file {path}; run the train command first")
        return EsaEngine(esa, formats.read_projection(path), layer_index=layer)
    raise ConfigurationError(f"unknown run mode {mode!r}")


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    k_override = _single_int(args.k, "--k")
    if k_override is not None:
        cfg = replace(cfg, esa=replace(cfg.esa, k=k_override))
    eps_override = _single_int(args.epsilon, "--epsilon")
    if eps_override is not None:
        cfg = replace(cfg, esa=replace(cfg.esa, epsilon=eps_override))
    out = _out_dir(args)
    length = args.length or 2048
    decode = args.decode or 0
    if length < 1:
        raise ConfigurationError("--length must be >= 1")
    modes = (args.mode or "esa").split(",")
    layers = range(cfg.toy.layers) if args.layer == "all" else [int(args.layer or 0)]

    model = ToyModel(cfg.toy)
    ids = model.tokens(length + decode)
    summary: dict = {"config_hash": cfg.config_hash, "modes": modes, "layers": {}}
    for layer in layers:
        q, k_rows, v = model.features(ids, layer)
        outputs: dict[str, list[np.ndarray]] = {}
        layer_doc: dict = {}
        for mode in modes:
            engine = _build_engine(mode, cfg, layer, out, args.basis, args.head_mode)
            trace_path = out / f"run_{mode}_layer{layer}.jsonl"
            collected = []
            with open(trace_path, "w") as f:
                f.write(json.dumps({"config_hash": cfg.config_hash, "mode": mode, "layer": layer}) + "\n")
                pos = 0
                for size in _chunk_sizes(length, cfg.esa.chunk):
                    fills = (engine.cache.l_i, engine.cache.l_l)
                    trace = engine.prefill(q[pos : pos + size], k_rows[pos : pos + size], v[pos : pos + size])
                    _write_trace_row(f, "prefill", trace, fills)
                    collected.append(trace.output)
                    pos += size
                for _ in range(decode):
                    fills = (engine.cache.l_i, engine.cache.l_l)
                    trace = engine.decode_step(q[pos], k_rows[pos], v[pos])
                    _write_trace_row(f, "decode", trace, fills)
                    collected.append(trace.output)
                    pos += 1
            outputs[mode] = collected
            sizes = engine.cache.cache_sizes()
            layer_doc[mode] = {
                "total_flops": engine.counter.total,
                "steps": engine.step_index,
                "cache": {"l_i": sizes.l_i, "l_m": sizes.l_m, "l_l": sizes.l_l,
                          "compressed_bytes": sizes.compressed_bytes, "kv_bytes": sizes.kv_bytes},
            }
        if "oracle" in modes:
            ref = np.concatenate(outputs["oracle"])
            for mode in modes:
                if mode == "oracle":
                    continue
                diff = np.abs(np.concatenate(outputs[mode]).astype(np.float64) - ref)
                layer_doc[f"{mode}_vs_oracle"] = {
                    "mean_abs_deviation": float(diff.mean()),
                    "max_abs_deviation": float(diff.max()),
                }
        summary["layers"][str(layer)] = layer_doc
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"run: modes={','.join(modes)} length={length} decode={decode} layers={list(layers)} -> {out}")
    return 0


def _write_trace_row(f, kind: str, trace, fills: tuple[int, int]) -> None:
    checksum = hashlib.sha256(np.ascontiguousarray(trace.output).tobytes()).hexdigest()[:16]
    f.write(
        json.dumps(
            {
                "step": trace.step_index,
                "kind": kind,
                "n_rows": trace.n_rows,
                "l_m": trace.l_m_before,
                "l_i": fills[0],
                "l_l": fills[1],
                "selected": trace.selection.indices.tolist(),
                "flops": trace.flop_count,
                "moved": trace.migration.moved_count,
                "output_sha": checksum,
            }
        )
        + "\n"
    )


def cmd_needle(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    eps_sweep = _int_list(args.epsilon or "0,1,3,5", "--epsilon")
    k_sweep = _int_list(str(args.k) if args.k is not None else "64", "--k")
    n_planted = args.planted or 8
    positions = None
    if args.positions:
        positions = np.array(_int_list(args.positions, "--positions"), dtype=np.int64)

    rows = []
    margin = None
    for k in k_sweep:
        for eps in eps_sweep:
            res = planted_needle_recall(
                cfg.esa, n_planted, k=k, epsilon=eps, seed=cfg.toy.seed,
                stream_len=args.stream_len, positions=positions,
            )
            rows.append({"epsilon": eps, "k": k, "recall": res.recall})
            margin = res.margin
    csv_path = out / "needle.csv"
    with open(csv_path, "w") as f:
        f.write(f"# config {cfg.config_hash}\n")
        f.write("epsilon,k,recall\n")
        for r in rows:
            f.write(f"{r['epsilon']},{r['k']},{r['recall']:.6f}\n")
    plots.plot_needle_sweep(rows, out / "needle.png")
    print(f"needle: planted={n_planted} margin={margin:.3f} rows={len(rows)} -> {csv_path}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    k_override = _single_int(args.k, "--k")
    if k_override is not None:
        cfg = replace(cfg, esa=replace(cfg.esa, k=k_override))
    eps_override = _single_int(args.epsilon, "--epsilon")
    if eps_override is not None:
        cfg = replace(cfg, esa=replace(cfg.esa, epsilon=eps_override))
    esa = cfg.esa
    model = CostModel(
        d_h=esa.d_h, h=esa.h, d_prime=esa.d_prime, l_i=esa.l_i,
        l_m=args.lm if args.lm is not None else 8192,
        l_l=esa.l_l, l_c=args.lc if args.lc is not None else esa.chunk,
        k=esa.k, epsilon=esa.epsilon, h_g=cfg.h_g,
    )
    doc = {
        "config_hash": cfg.config_hash,
        "model": dataclasses.asdict(model),
        "full_attention_flops": full_attention_flops(model),
        "esa_flops": esa_flops(model),
        "reduction_ratio_exact": reduction_ratio_exact(model),
        "reduction_ratio_asymptotic": reduction_ratio_asymptotic(model),
    }
    if cfg.h_g is not None:
        doc["cache_overhead_ratio"] = cache_overhead_ratio(model)
    if args.trace:
        trace_path = Path(args.trace)
        if trace_path.suffix == ".jsonl":
            # Per-step reconciliation: predict each step at its recorded
            # middle length and chunk size, then compare totals.
            rows = [json.loads(line) for line in trace_path.read_text().splitlines()]
            if not rows or "mode" not in rows[0]:
                raise FormatError(f"{trace_path}: missing trace header row")
            if rows[0]["mode"] == "oracle":
                raise ConfigurationError("reconciliation expects an esa-mode trace, not oracle")
            measured = sum(r["flops"] for r in rows[1:])
            predicted = sum(
                esa_flops(
                    dataclasses.replace(
                        model,
                        l_m=r["l_m"],
                        l_c=r["n_rows"],
                        l_i=r.get("l_i", model.l_i),
                        l_l=r.get("l_l", model.l_l),
                        k=min(model.k, r["l_m"]),
                    )
                )
                for r in rows[1:]
            )
            doc["measured_total_flops"] = measured
            doc["predicted_total_flops"] = predicted
            doc["measured_over_predicted"] = measured / predicted if predicted else None
        else:
            # A run summary only carries totals, so report them unjudged.
            trace_doc = json.loads(trace_path.read_text())
            measured = 0
            for layer_doc in trace_doc.get("layers", {}).values():
                for mode, mode_doc in layer_doc.items():
                    if isinstance(mode_doc, dict) and "total_flops" in mode_doc and mode != "oracle":
                        measured += mode_doc["total_flops"]
            doc["measured_total_flops"] = measured
    text = json.dumps(doc, indent=2)
    print(text)
    if args.out_dir:
        out = _out_dir(args)
        (out / "analysis.json").write_text(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esa", description="Selective-attention experiment driver.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON file")
        p.add_argument("--preset", choices=["large", "desk"], help="built-in parameter set")
        p.add_argument("--seed", type=int, help="override the toy-model seed")
        p.add_argument("--out-dir", help="artifact directory")
        p.add_argument("--dprime", type=int, help="override reduced dimension d'")
        p.add_argument("--k", help="command-specific k (selection budget, recall k, or sweep)")
        p.add_argument("--epsilon", help="proximity distance (needle: comma-separated sweep)")

    p = sub.add_parser("calibrate", help="dump per-layer query/key calibration sets")
    common(p)
    p.add_argument("--length", type=int, help="corpus length (= pairs per layer)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="fit learned projections on calibration dumps")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-recall", help="recall@k of compressed vs full-dimension scoring")
    common(p)
    p.add_argument("--mode", help="comma list of learned,pca,pca-joint (default learned,pca)")
    p.add_argument("--eval-keys", help="candidate key position range A:B (default 2000:4000)")
    p.add_argument("--eval-queries", type=int, help="query rows after the key range (default 500)")
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("run", help="stream a toy corpus through the engine")
    common(p)
    p.add_argument("--length", type=int, help="prefill stream length (default 2048)")
    p.add_argument("--decode", type=int, help="decode steps after prefill (default 0)")
    p.add_argument("--mode", help="comma list of esa,oracle,identity-esa (default esa)")
    p.add_argument("--basis", choices=["compressed", "full_dim"], help="scoring basis override")
    p.add_argument("--head-mode", choices=["uniform_sum", "individual_max"], dest="head_mode",
                   help="head aggregation for full_dim scoring")
    p.add_argument("--chunk", type=int, help="prefill chunk size override")
    p.add_argument("--layer", help="layer index or 'all' (default 0)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("needle", help="planted-needle selection recall sweep")
    common(p)
    p.add_argument("--planted", type=int, help="number of planted keys (default 8)")
    p.add_argument("--stream-len", type=int, help="total stream length")
    p.add_argument("--positions", help="comma-separated planted stream positions")
    p.set_defaults(func=cmd_needle)

    p = sub.add_parser("analyze", help="closed-form cost model values")
    common(p)
    p.add_argument("--lm", type=int, help="middle length l_M (default 8192)")
    p.add_argument("--lc", type=int, help="chunk length l_C (default config chunk)")
    p.add_argument("--hg", type=int, help="grouped-query head count")
    p.add_argument(
        "--trace",
        help="run_*.jsonl for per-step flop reconciliation, or run_summary.json for measured totals",
    )
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
