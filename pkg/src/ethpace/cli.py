"""Command-line pipeline: synth, ingest, sample, features, screen, train,
explain, or the whole run with a manifest.

All randomness flows from one master seed through labeled derivation, and no
artifact embeds wall-clock state, so two runs with the same config hash and
seed are byte-identical regardless of thread count (timings live only in the
manifest, outside the content hash).

Exit codes: 0 success, 2 config error, 3 data error, 4 protocol error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import yaml

from . import chain, explain as explain_mod, features as features_mod, screen as screen_mod
from .forest import (
    Hyperparams,
    ProtocolError,
    RandomForest,
    SearchSpace,
    SplitProtocol,
    fit_forest,
    random_search,
    run_protocol,
    split_by_days,
)
from .seeding import rng_for

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PROTOCOL = 4

STAGES = ("synth", "ingest", "sample", "features", "screen", "train", "explain")

DATASET_FILES = ("blocks", "transactions", "contracts", "pending_pool", "net_util")


class ConfigError(ValueError):
    pass


class MissingArtifactError(RuntimeError):
    def __init__(self, stage: str, path: str):
        self.stage = stage
        super().__init__(
            f"missing artifact {path!r} from stage '{stage}': run `ethpace {stage}` (or `ethpace run`) first"
        )


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------- config ---

_DEFAULTS = {
    "seed": 0,
    "out": "runs/out",
    "threads": 1,
    "sampling": {"enabled": True, "confidence": 0.95, "margin": 0.05},
    "screening": {"rho_threshold": 0.7, "r2_threshold": 0.9},
    "protocol": {
        "bootstraps": 100,
        "search_iterations": 20,
        "reduced": False,
        "train_days": 28,
        "validation_days": 1,
        "test_days": 1,
        "space": {
            "tree_count": [10, 300],
            "max_depth": list(range(3, 31)) + ["unlimited"],
            "feature_fraction": ["sqrt", "log2", 0.3, 0.5, 1.0],
            "min_leaf_size": [1],
        },
    },
    "explain": {
        "rank": True,
        "pdp": [],
        "pdp_svg": False,
        "interactions": {"pairs": [], "rows": 20, "samples": 32},
        "waterfall": {"count": 1, "tx_hashes": []},
        "chunks": [],
    },
}


def _merge_defaults(config: dict, defaults: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, val in config.items():
        here = f"{path}.{key}" if path else key
        if key in defaults and isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here}: expected a mapping")
            out[key] = _merge_defaults(val, defaults[key], here)
        else:
            out[key] = val
    return out


def _require_fraction(cfg: dict, path: str) -> None:
    keys = path.split(".")
    val = cfg
    for k in keys:
        val = val[k]
    if not (isinstance(val, (int, float)) and 0.0 < float(val) < 1.0):
        raise ConfigError(f"{path}: must be a number in (0, 1), got {val!r}")


def load_config(path, overrides=None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = _merge_defaults(raw, _DEFAULTS)
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if "synth" not in cfg and "inputs" not in cfg:
        raise ConfigError("config needs either a 'synth' or an 'inputs' section")
    if "inputs" in cfg:
        for key in DATASET_FILES:
            if key not in cfg["inputs"]:
                raise ConfigError(f"inputs.{key}: missing path")
    if "synth" in cfg:
        synth = cfg["synth"]
        if synth.get("signal", "none") not in ("none", "competitiveness", "flat"):
            raise ConfigError(f"synth.signal: unknown signal {synth.get('signal')!r}")
    _require_fraction(cfg, "sampling.confidence")
    _require_fraction(cfg, "sampling.margin")
    _require_fraction(cfg, "screening.rho_threshold")
    _require_fraction(cfg, "screening.r2_threshold")
    proto = cfg["protocol"]
    for key in ("bootstraps", "search_iterations", "train_days", "validation_days", "test_days"):
        if not isinstance(proto.get(key), int) or proto[key] < 1:
            raise ConfigError(f"protocol.{key}: must be a positive integer")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads: must be a positive integer")
    space = proto["space"]
    tc = space.get("tree_count")
    if not (isinstance(tc, list) and len(tc) == 2 and all(isinstance(v, int) for v in tc)):
        raise ConfigError("protocol.space.tree_count: expected [lo, hi]")


def config_hash(cfg: dict) -> str:
    """Hash of the semantic config: output dir and thread count excluded."""
    semantic = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
    return sha256_text(canonical_json(semantic))


def _synth_config(cfg: dict):
    from .synth import SynthConfig

    synth = cfg["synth"]
    known = {
        "n_days", "mean_block_interval", "block_capacity", "arrival_rate",
        "gas_price_distribution", "issuer_pool_size", "contract_pool_size",
        "noise_sd", "contract_fraction",
    }
    kwargs = {k: v for k, v in synth.items() if k in known}
    unknown = set(synth) - known - {"signal"}
    if unknown:
        raise ConfigError(f"synth.{sorted(unknown)[0]}: unknown field")
    try:
        return SynthConfig(seed=cfg["seed"], **kwargs)
    except ValueError as exc:
        raise ConfigError(f"synth: {exc}")


def _search_space(cfg: dict) -> SearchSpace:
    space = cfg["protocol"]["space"]
    try:
        return SearchSpace(
            tree_count_range=tuple(space["tree_count"]),
            max_depths=tuple(None if d == "unlimited" else int(d) for d in space["max_depth"]),
            feature_fractions=tuple(space["feature_fraction"]),
            min_leaf_sizes=tuple(space.get("min_leaf_size", [1])),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"protocol.space: {exc}")


def _split(cfg: dict) -> SplitProtocol:
    proto = cfg["protocol"]
    return SplitProtocol(
        train_days=proto["train_days"],
        validation_days=proto["validation_days"],
        test_days=proto["test_days"],
        bootstrap_count=proto["bootstraps"],
    )


# ---------------------------------------------------------------- stages ---


class Pipeline:
    def __init__(self, cfg: dict, out_dir: str):
        self.cfg = cfg
        self.out = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.cfg_hash = config_hash(cfg)

    # paths
    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def dataset_paths(self) -> dict[str, str]:
        if "synth" in self.cfg:
            d = self.path("dataset")
            return {
                "blocks": os.path.join(d, "blocks.jsonl"),
                "transactions": os.path.join(d, "transactions.jsonl"),
                "contracts": os.path.join(d, "contracts.jsonl"),
                "pending_pool": os.path.join(d, "pending_pool.csv"),
                "net_util": os.path.join(d, "net_util.csv"),
            }
        return {k: self.cfg["inputs"][k] for k in DATASET_FILES}

    def _need(self, stage: str, path: str) -> str:
        if not os.path.exists(path):
            raise MissingArtifactError(stage, path)
        return path

    def load_dataset(self, requiring_stage: str):
        paths = self.dataset_paths()
        for key in DATASET_FILES:
            self._need("synth" if "synth" in self.cfg else "ingest", paths[key])
        ds, report = chain.load_dataset(
            paths["blocks"], paths["transactions"], paths["contracts"],
            paths["pending_pool"], paths["net_util"],
        )
        return ds, report

    def _report_header(self) -> dict:
        return {"config_hash": self.cfg_hash, "seed": self.cfg["seed"]}

    # stage bodies: each returns the list of produced files
    def stage_synth(self) -> list[str]:
        if "synth" not in self.cfg:
            return []
        from .synth import generate, plant_signal

        sc = _synth_config(self.cfg)
        signal = self.cfg["synth"].get("signal", "none")
        dataset = generate(sc) if signal == "none" else plant_signal(sc, signal)
        paths = chain.write_dataset(dataset, self.path("dataset"))
        return [paths[k] for k in DATASET_FILES]

    def stage_ingest(self) -> list[str]:
        _, report = self.load_dataset("ingest")
        out = self.path("ingest_report.json")
        with open(out, "w", encoding="utf-8") as fh:
            json.dump({**self._report_header(), **report.to_dict()}, fh, indent=1)
        return [out]

    def stage_sample(self) -> list[str]:
        out = self.path("sampled_blocks.json")
        sampling = self.cfg["sampling"]
        if not sampling["enabled"]:
            payload = {**self._report_header(), "enabled": False, "blocks": None}
        else:
            ds, _ = self.load_dataset("sample")
            blocks, warnings = chain.sample_blocks_per_day(
                ds, sampling["confidence"], sampling["margin"], self.cfg["seed"]
            )
            payload = {
                **self._report_header(),
                "enabled": True,
                "confidence": sampling["confidence"],
                "margin": sampling["margin"],
                "blocks": blocks,
                "warnings": warnings,
            }
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        return [out]

    def stage_features(self) -> list[str]:
        ds, _ = self.load_dataset("features")
        with open(self._need("sample", self.path("sampled_blocks.json")), "r", encoding="utf-8") as fh:
            sampled = json.load(fh)
        whitelist = sampled["blocks"] if sampled.get("enabled") else None
        matrix = features_mod.build_feature_matrix(ds, block_whitelist=whitelist)
        csv_path = self.path("features.csv")
        meta_path = self.path("features.meta.json")
        features_mod.write_feature_csv(matrix, csv_path, meta_path)
        return [csv_path, meta_path]

    def stage_screen(self, reduced: bool) -> list[str]:
        matrix = features_mod.read_feature_csv(
            self._need("features", self.path("features.csv")),
            self._need("features", self.path("features.meta.json")),
        )
        matrix = screen_mod.log1p_transform(matrix)
        train_rows, _, _ = split_by_days(matrix, _split(self.cfg), reduced=reduced)
        screened, report = screen_mod.screen_matrix(
            matrix,
            rho_threshold=self.cfg["screening"]["rho_threshold"],
            r2_threshold=self.cfg["screening"]["r2_threshold"],
            decision_rows=train_rows,
        )
        csv_path = self.path("screened.csv")
        meta_path = self.path("screened.meta.json")
        report_path = self.path("screen_report.json")
        features_mod.write_feature_csv(screened, csv_path, meta_path)
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump({**self._report_header(), **report.to_dict()}, fh, indent=1)
        return [csv_path, meta_path, report_path]

    def _screened_matrix(self) -> features_mod.FeatureMatrix:
        return features_mod.read_feature_csv(
            self._need("screen", self.path("screened.csv")),
            self._need("screen", self.path("screened.meta.json")),
        )

    def stage_train(self, reduced: bool, threads: int) -> list[str]:
        matrix = self._screened_matrix()
        split = _split(self.cfg)
        space = _search_space(self.cfg)
        seed = self.cfg["seed"]
        report = run_protocol(
            matrix, split, space,
            search_iterations=self.cfg["protocol"]["search_iterations"],
            seed=seed, threads=threads, reduced=reduced, label="full",
        )
        eval_path = self.path("eval_report.json")
        with open(eval_path, "w", encoding="utf-8") as fh:
            json.dump({**self._report_header(), **report.to_dict()}, fh, indent=1)

        train_rows, val_rows, _ = split_by_days(matrix, split, reduced=reduced)
        hp = random_search(
            matrix.values[train_rows], matrix.target[train_rows],
            matrix.values[val_rows], matrix.target[val_rows],
            space, self.cfg["protocol"]["search_iterations"],
            seed=int(rng_for(seed, "final-model").integers(0, 2**31)),
        )
        final = fit_forest(
            matrix.values[train_rows], matrix.target[train_rows],
            hp, feature_names=matrix.columns,
        )
        forest_path = self.path("forest.json")
        final.to_json(forest_path)
        return [eval_path, forest_path]

    def stage_explain(self, reduced: bool, threads: int) -> list[str]:
        matrix = self._screened_matrix()
        forest = RandomForest.from_json(self._need("train", self.path("forest.json")))
        split = _split(self.cfg)
        space = _search_space(self.cfg)
        seed = self.cfg["seed"]
        ex = self.cfg["explain"]
        outputs: list[str] = []
        train_rows, _, test_rows = split_by_days(matrix, split, reduced=reduced)
        train_matrix = matrix.take_rows(train_rows)

        if ex["rank"]:
            table = explain_mod.rank_features(forest, train_matrix, threads=threads)
            rank_path = self.path("rank.csv")
            explain_mod.write_rank_csv(table, rank_path)
            outputs.append(rank_path)

        for feature in ex["pdp"]:
            curve = explain_mod.pdp(forest, train_matrix, feature)
            base = f"pdp_{feature}"
            csv_path = self.path(base + ".csv")
            meta_path = self.path(base + ".json")
            svg_path = self.path(base + ".svg") if ex["pdp_svg"] else None
            explain_mod.write_pdp(curve, csv_path, meta_path, svg_path)
            outputs.extend(p for p in (csv_path, meta_path, svg_path) if p)

        pairs = ex["interactions"]["pairs"]
        if pairs:
            rows = min(int(ex["interactions"]["rows"]), train_matrix.n_rows)
            pick = np.unique(np.linspace(0, train_matrix.n_rows - 1, rows, dtype=int))
            x = train_matrix
            payload = {}
            for a, b in pairs:
                vals = []
                for i in pick:
                    im = explain_mod.interaction_values(
                        forest, {c: x.column(c)[i] for c in x.columns},
                        mode="auto", samples=int(ex["interactions"]["samples"]), seed=seed,
                    )
                    vals.append(abs(im.pair(a, b)))
                payload[f"{a}|{b}"] = {"mean_abs": float(np.mean(vals)), "rows": int(pick.size)}
            inter_path = self.path("interactions.json")
            with open(inter_path, "w", encoding="utf-8") as fh:
                json.dump({**self._report_header(), "pairs": payload}, fh, indent=1)
            outputs.append(inter_path)

        wf = ex["waterfall"]
        hashes = list(wf["tx_hashes"])
        count = int(wf["count"])
        if count > 0:
            test_matrix = matrix.take_rows(test_rows)
            hashes.extend(test_matrix.tx_hashes[:count])
        for h in hashes:
            if h not in matrix.tx_hashes:
                raise chain.DataError(f"waterfall target {h!r} is not in the feature matrix")
            i = matrix.tx_hashes.index(h)
            expl = explain_mod.tree_shap(forest, {c: matrix.column(c)[i] for c in matrix.columns})
            entries = explain_mod.waterfall(expl)
            wf_path = self.path(f"waterfall_{h}.json")
            with open(wf_path, "w", encoding="utf-8") as fh:
                json.dump(
                    {**self._report_header(), "tx_hash": h,
                     **explain_mod.waterfall_to_dict(expl, entries)},
                    fh, indent=1,
                )
            outputs.append(wf_path)

        if ex["chunks"]:
            full, results = explain_mod.chunk_tests(
                matrix, ex["chunks"], split, space,
                search_iterations=self.cfg["protocol"]["search_iterations"],
                seed=seed, threads=threads, reduced=reduced,
            )
            chunk_path = self.path("chunks.json")
            with open(chunk_path, "w", encoding="utf-8") as fh:
                json.dump(
                    {
                        **self._report_header(),
                        "full_summary": full.summary(),
                        "dimensions": {d: r.to_dict() for d, r in results.items()},
                    },
                    fh, indent=1,
                )
            outputs.append(chunk_path)
        return outputs


# ----------------------------------------------------------------- run ---


def _stage_inputs_hash(pipe: Pipeline, stage: str, reduced: bool) -> str:
    cfg = pipe.cfg
    parts: dict = {"seed": cfg["seed"], "stage": stage, "reduced": reduced}
    if stage == "synth":
        parts["synth"] = cfg.get("synth")
    elif stage in ("ingest", "sample", "features"):
        paths = pipe.dataset_paths()
        parts["dataset"] = {k: sha256_file(paths[k]) if os.path.exists(paths[k]) else None for k in paths}
        if stage == "sample":
            parts["sampling"] = cfg["sampling"]
        if stage == "features":
            sb = pipe.path("sampled_blocks.json")
            parts["sampled"] = sha256_file(sb) if os.path.exists(sb) else None
    elif stage == "screen":
        parts["screening"] = cfg["screening"]
        parts["protocol"] = cfg["protocol"]
        for f in ("features.csv", "features.meta.json"):
            p = pipe.path(f)
            parts[f] = sha256_file(p) if os.path.exists(p) else None
    elif stage in ("train", "explain"):
        parts["protocol"] = cfg["protocol"]
        for f in ("screened.csv", "screened.meta.json"):
            p = pipe.path(f)
            parts[f] = sha256_file(p) if os.path.exists(p) else None
        if stage == "explain":
            parts["explain"] = cfg["explain"]
            fp = pipe.path("forest.json")
            parts["forest.json"] = sha256_file(fp) if os.path.exists(fp) else None
    return sha256_text(canonical_json(parts))


def run_stage(pipe: Pipeline, stage: str, reduced: bool, threads: int) -> list[str]:
    if stage == "synth":
        return pipe.stage_synth()
    if stage == "ingest":
        return pipe.stage_ingest()
    if stage == "sample":
        return pipe.stage_sample()
    if stage == "features":
        return pipe.stage_features()
    if stage == "screen":
        return pipe.stage_screen(reduced)
    if stage == "train":
        return pipe.stage_train(reduced, threads)
    if stage == "explain":
        return pipe.stage_explain(reduced, threads)
    raise ConfigError(f"unknown stage {stage!r}")


def cmd_run(pipe: Pipeline, reduced: bool, threads: int) -> dict:
    manifest_path = pipe.path("manifest.json")
    previous = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            previous = {s["name"]: s for s in json.load(fh).get("stages", [])}

    stages = []
    for stage in STAGES:
        entry = {"name": stage}
        t0 = time.monotonic()
        if stage == "synth" and "synth" not in pipe.cfg:
            entry.update(status="skipped", outputs={}, inputs_hash="", seconds=0.0)
            stages.append(entry)
            continue
        inputs_hash = _stage_inputs_hash(pipe, stage, reduced)
        prev = previous.get(stage)
        if (
            prev
            and prev.get("inputs_hash") == inputs_hash
            and prev.get("outputs")
            and all(
                os.path.exists(pipe.path(rel)) and sha256_file(pipe.path(rel)) == digest
                for rel, digest in prev["outputs"].items()
            )
        ):
            entry.update(
                status="cached",
                inputs_hash=inputs_hash,
                outputs=prev["outputs"],
                seconds=round(time.monotonic() - t0, 3),
            )
            stages.append(entry)
            continue
        produced = run_stage(pipe, stage, reduced, threads)
        outputs = {os.path.relpath(p, pipe.out): sha256_file(p) for p in produced}
        entry.update(
            status="done",
            inputs_hash=inputs_hash,
            outputs=outputs,
            seconds=round(time.monotonic() - t0, 3),
        )
        stages.append(entry)

    combined = hashlib.sha256()
    for stage in stages:
        for rel in sorted(stage.get("outputs", {})):
            combined.update(rel.encode("utf-8"))
            combined.update(stage["outputs"][rel].encode("utf-8"))
    manifest = {
        "config_hash": pipe.cfg_hash,
        "seed": pipe.cfg["seed"],
        "package_version": _version(),
        "reduced_protocol": reduced,
        "artifacts_hash": combined.hexdigest(),
        "stages": stages,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def _version() -> str:
    from . import __version__

    return __version__


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ethpace",
        description="Transaction processing-time pipeline: synthesize or ingest chain dumps, "
        "engineer rolling-window features, screen them, train validated forests, explain them.",
    )
    parser.add_argument("command", choices=list(STAGES) + ["run"], help="pipeline stage to execute")
    parser.add_argument("--config", required=True, help="path to the YAML run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None, help="worker cap (results identical for any value)")
    parser.add_argument(
        "--reduced-protocol",
        action="store_true",
        help="row-fraction train/validation/test split for datasets shorter than the day-based protocol",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides={"seed": args.seed, "out": args.out, "threads": args.threads})
        reduced = bool(args.reduced_protocol or cfg["protocol"]["reduced"])
        threads = int(cfg["threads"])
        pipe = Pipeline(cfg, cfg["out"])
        if args.command == "run":
            manifest = cmd_run(pipe, reduced, threads)
            statuses = {s["name"]: s["status"] for s in manifest["stages"]}
            print(json.dumps({"artifacts_hash": manifest["artifacts_hash"], "stages": statuses}))
        else:
            produced = run_stage(pipe, args.command, reduced, threads)
            print(json.dumps({"stage": args.command, "outputs": [os.path.relpath(p, pipe.out) for p in produced]}))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except MissingArtifactError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (chain.DataError, features_mod.FeatureError, screen_mod.ScreenError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
