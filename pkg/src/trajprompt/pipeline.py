"""Pipeline stages with content-hash caching and provenance files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from . import __version__
from .config import PipelineConfig, stable_hash
from .corpus import TokenBudget, build_corpus, emit_jsonl, load_jsonl
from .embedding import EndpointConfig, HashingEmbedder, RemoteEmbedder, VectorStore, load_vectors, store_vectors
from .evaluation import EvalReport, evaluate
from .inference import CompletionConfig, FrequencyPredictor, complete, load_predictions, run_predictions, save_predictions
from .ingest import load_split, parse_checkins, preprocess, save_split
from .prompting import DEFAULT_TEMPLATE, PromptTemplate, Variant, build_key_prompt, build_query_prompt, mask_context
from .retrieval import build_all_retrievals, key_id, load_retrievals, query_id, save_retrievals

log = logging.getLogger(__name__)

PROVENANCE = "provenance.json"
STAGES = ("preprocess", "embed", "retrieve", "emit", "predict", "evaluate")
SPLITS = ("train", "validation", "test")


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str, detail: str = "missing"):
        super().__init__(f"{detail} {path}; run `trajprompt {producer}` first")
        self.path = path
        self.producer = producer


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    """Resolved locations for one pipeline run; ``sweep_dir`` relocates the budget-dependent stages."""

    config: PipelineConfig
    sweep_dir: Path | None = None
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def workdir(self) -> Path:
        return self.config.resolve(self.config.workdir)

    def stage_dir(self, stage: str) -> Path:
        if self.sweep_dir is not None and stage in ("retrieve", "emit", "predict", "evaluate"):
            return self.sweep_dir / stage
        return self.workdir / stage

    def need(self, stage: str, name: str) -> Path:
        p = self.stage_dir(stage) / name
        if not p.exists():
            raise MissingArtifact(p, stage)
        return p

    def need_fresh(self, stage: str, name: str, settings: dict) -> Path:
        """Like ``need``, but also require that ``stage`` last ran with ``settings``."""
        p = self.need(stage, name)
        prov = self.stage_dir(stage) / PROVENANCE
        recorded = json.loads(prov.read_text(encoding="utf-8")).get("settings_hash") if prov.exists() else None
        if recorded != stable_hash(settings):
            raise MissingArtifact(p, stage, detail="stale (produced with different settings)")
        return p

    def template(self) -> PromptTemplate:
        path = self.config.resolve(self.config.prompting.template)
        return PromptTemplate.from_file(path) if path else DEFAULT_TEMPLATE


def _label(path: Path, root: Path) -> str:
    try:
        return path.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return path.name


def _stage(
    run: Run,
    stage: str,
    settings: dict,
    inputs: Sequence[Path],
    produce: Callable[[Path], Sequence[Path]],
    force: bool = False,
) -> Path:
    """Run ``produce`` unless the recorded provenance still matches settings and file hashes."""
    out_dir = run.stage_dir(stage)
    prov_path = out_dir / PROVENANCE
    input_hashes = {_label(p, run.workdir): file_hash(p) for p in inputs}
    settings_hash = stable_hash(settings)
    if not force and prov_path.exists():
        prov = json.loads(prov_path.read_text(encoding="utf-8"))
        outputs_ok = all((out_dir / name).exists() and file_hash(out_dir / name) == h for name, h in prov.get("outputs", {}).items())
        if prov.get("settings_hash") == settings_hash and prov.get("inputs") == input_hashes and outputs_ok:
            log.info("%s: inputs unchanged, skipping", stage)
            run.skipped.append(stage)
            return out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("%s: running", stage)
    outputs = produce(out_dir)
    prov = {
        "stage": stage,
        "version": __version__,
        "config_fingerprint": run.config.fingerprint(),
        "settings_hash": settings_hash,
        "settings": settings,
        "inputs": input_hashes,
        "outputs": {p.name: file_hash(p) for p in sorted(outputs)},
    }
    prov_path.write_text(json.dumps(prov, sort_keys=True, indent=1, default=str) + "\n", encoding="utf-8")
    run.executed.append(stage)
    return out_dir


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def cmd_preprocess(run: Run, force: bool = False) -> Path:
    cfg = run.config
    src = cfg.resolve(cfg.ingest.input)
    if src is None or not src.exists():
        raise FileNotFoundError(f"ingest.input not found: {src}")
    settings = dataclasses.asdict(cfg.ingest)
    settings.pop("input")

    def produce(out: Path) -> list[Path]:
        checkins, errors = parse_checkins(src, cfg.ingest.column_schema())
        if errors:
            log.warning("%d malformed rows skipped while parsing %s", len(errors), src)
        split = preprocess(checkins, cfg.ingest.segmentation())
        split.stats["skipped_rows"] = len(errors)
        return save_split(split, out)

    return _stage(run, "preprocess", settings, [src], produce, force)


def _split_files(run: Run) -> list[Path]:
    return [run.need("preprocess", f"{n}.jsonl") for n in SPLITS] + [run.need("preprocess", "id_maps.json")]


def make_embedder(cfg: PipelineConfig, client: httpx.Client | None = None):
    e = cfg.embedding
    if e.backend == "hashing":
        return HashingEmbedder(dim=e.dim, seed=cfg.seed)
    ep = EndpointConfig.from_env(
        "TRAJPROMPT_EMBED",
        url=e.endpoint.url or None,
        model=e.endpoint.model or None,
        timeout=e.endpoint.timeout,
        max_attempts=e.endpoint.max_attempts,
        backoff=e.endpoint.backoff,
        batch_size=e.endpoint.batch_size,
        concurrency=e.endpoint.concurrency,
    )
    return RemoteEmbedder(ep, dim=e.dim, client=client)


def cmd_embed(run: Run, force: bool = False, client: httpx.Client | None = None) -> Path:
    cfg = run.config
    inputs = _split_files(run)
    settings = {"embedding": cfg.to_dict()["embedding"], "seed": cfg.seed, "template": _template_settings(run)}
    settings["embedding"]["endpoint"].pop("concurrency")
    settings["embedding"]["endpoint"].pop("batch_size")

    def produce(out: Path) -> list[Path]:
        split = load_split(run.workdir / "preprocess")
        template = run.template()
        trajs = split.all_trajectories()
        ids, texts = [], []
        for t in trajs:
            ids += [key_id(t.trajectory_id), query_id(t.trajectory_id)]
            texts += [build_key_prompt(t, template), build_query_prompt(t, template)]
        embedder = make_embedder(cfg, client)
        store = VectorStore.build(ids, embedder.embed(texts), dim=cfg.embedding.dim)
        path = out / "vectors.tpvs"
        store_vectors(store, path)
        return [path]

    return _stage(run, "embed", settings, inputs, produce, force)


def _template_settings(run: Run) -> dict:
    return dataclasses.asdict(run.template())


def cmd_retrieve(run: Run, force: bool = False) -> Path:
    cfg = run.config
    rcfg = cfg.retrieval_config()
    inputs = _split_files(run) + [run.need("embed", "vectors.tpvs")]

    def produce(out: Path) -> list[Path]:
        split = load_split(run.workdir / "preprocess")
        store = load_vectors(run.workdir / "embed" / "vectors.tpvs")
        results = build_all_retrievals(
            split.all_trajectories(),
            store,
            rcfg,
            train_ids=[t.trajectory_id for t in split.train],
            workers=cfg.workers,
        )
        path = out / "retrievals.jsonl"
        save_retrievals(results, path)
        return [path]

    return _stage(run, "retrieve", dataclasses.asdict(rcfg), inputs, produce, force)


def cmd_emit(run: Run, force: bool = False) -> Path:
    cfg = run.config
    rcfg = cfg.retrieval_config()
    variant = cfg.effective_variant()
    use_history = rcfg.history_checkin_budget > 0
    inputs = _split_files(run)
    if use_history:
        inputs.append(run.need_fresh("retrieve", "retrievals.jsonl", dataclasses.asdict(rcfg)))
    settings = _emit_settings(run)

    def produce(out: Path) -> list[Path]:
        split = load_split(run.workdir / "preprocess")
        retrievals = load_retrievals(run.stage_dir("retrieve") / "retrievals.jsonl") if use_history else None
        c = cfg.corpus
        budget = TokenBudget(c.max_tokens, c.chars_per_token, c.reserve_for_answer)
        template = run.template()
        base_variant = Variant.FULL if variant == Variant.MASKED_CONTEXT else variant
        corpora, skipped = build_corpus(
            split,
            retrievals,
            budget,
            template=template,
            history_checkin_budget=rcfg.history_checkin_budget,
            variant=base_variant,
            workers=cfg.workers,
        )
        if variant == Variant.MASKED_CONTEXT:
            corpora = {n: [mask_context(r, cfg.seed, template) for r in rs] for n, rs in corpora.items()}
        written = []
        for name in SPLITS:
            p = out / f"{name}.jsonl"
            emit_jsonl(corpora[name], p)
            written.append(p)
            if c.plain:
                pp = out / f"{name}.plain.jsonl"
                emit_jsonl(corpora[name], pp, include_metadata=False)
                written.append(pp)
        if c.mask_test and variant != Variant.MASKED_CONTEXT:
            p = out / "test_masked.jsonl"
            emit_jsonl([mask_context(r, cfg.seed, template) for r in corpora["test"]], p)
            written.append(p)
        sk = out / "skipped.json"
        sk.write_text(
            json.dumps([{"trajectory_id": s.trajectory_id, "reason": s.reason} for s in skipped], indent=1) + "\n",
            encoding="utf-8",
        )
        written.append(sk)
        return written

    return _stage(run, "emit", settings, inputs, produce, force)


def _emit_settings(run: Run) -> dict:
    cfg = run.config
    return {
        "corpus": dataclasses.asdict(cfg.corpus),
        "variant": cfg.effective_variant().value,
        "budget": cfg.retrieval_config().history_checkin_budget,
        "seed": cfg.seed,
        "template": _template_settings(run),
    }


def make_generator(cfg: PipelineConfig, client: httpx.Client | None = None) -> Callable[[str], str]:
    inf = cfg.inference
    if inf.backend == "frequency":
        return FrequencyPredictor()
    ep = inf.endpoint
    ccfg = CompletionConfig(
        url=ep.url,
        model=ep.model,
        timeout=ep.timeout,
        max_attempts=ep.max_attempts,
        backoff=ep.backoff,
        mode=ep.mode,
        max_new_tokens=ep.max_new_tokens,
    )
    env = EndpointConfig.from_env("TRAJPROMPT_COMPLETE")
    ccfg.url = ccfg.url or env.url
    ccfg.model = ccfg.model or env.model
    ccfg.api_key = env.api_key
    return lambda q: complete(q, ccfg, client)


def _latency_summary(latencies: Sequence[int]) -> dict:
    if not latencies:
        return {"n": 0}
    ms = sorted(latencies)
    return {
        "n": len(ms),
        "mean_ms": sum(ms) / len(ms),
        "p50_ms": ms[len(ms) // 2],
        "p95_ms": ms[min(len(ms) - 1, int(0.95 * len(ms)))],
        "max_ms": ms[-1],
    }


def cmd_predict(run: Run, force: bool = False, client: httpx.Client | None = None) -> Path:
    cfg = run.config
    corpus_name = f"{cfg.inference.corpus}.jsonl"
    inputs = [run.need_fresh("emit", corpus_name, _emit_settings(run)), run.need("preprocess", "id_maps.json")]
    settings = cfg.to_dict()["inference"]
    for key in ("concurrency", "batch_size", "url", "timeout", "max_attempts", "backoff"):
        settings["endpoint"].pop(key)

    def produce(out: Path) -> list[Path]:
        records, _ = load_jsonl(run.stage_dir("emit") / corpus_name)
        split = load_split(run.workdir / "preprocess")
        ckpt = out / "checkpoint.jsonl"
        if force and ckpt.exists():
            ckpt.unlink()
        preds = run_predictions(
            records,
            make_generator(cfg, client),
            split.id_maps.id_range,
            concurrency_limit=max(cfg.inference.endpoint.concurrency, cfg.workers),
            checkpoint=ckpt,
        )
        # latency is kept out of the predictions file so it stays byte-deterministic
        path = out / "predictions.jsonl"
        save_predictions(preds, path, with_latency=False)
        timing = out / "timing.json"
        timing.write_text(json.dumps(_latency_summary([p.latency_ms for p in preds]), indent=1) + "\n", encoding="utf-8")
        failed = sum(1 for p in preds if p.error)
        if failed:
            log.warning("%d predictions failed at the transport level", failed)
        ckpt.unlink(missing_ok=True)
        return [path, timing]

    return _stage(run, "predict", settings, inputs, produce, force)


def cmd_evaluate(run: Run, force: bool = False) -> Path:
    cfg = run.config
    corpus_name = f"{cfg.inference.corpus}.jsonl"
    inputs = [run.need("predict", "predictions.jsonl"), run.need_fresh("emit", corpus_name, _emit_settings(run))]
    inputs += _split_files(run)
    settings = {"evaluation": dataclasses.asdict(cfg.evaluation), "fingerprint": cfg.fingerprint()}

    def produce(out: Path) -> list[Path]:
        records, _ = load_jsonl(run.stage_dir("emit") / corpus_name)
        preds = load_predictions(run.stage_dir("predict") / "predictions.jsonl")
        split = load_split(run.workdir / "preprocess")
        report = evaluate(
            records,
            preds,
            train=split.train,
            test=split.test,
            partitions=cfg.evaluation.partitions,
            config_fingerprint=cfg.fingerprint(),
        )
        pj, pt = out / "report.json", out / "report.txt"
        pj.write_text(report.to_json(), encoding="utf-8")
        pt.write_text(report.to_table(), encoding="utf-8")
        return [pj, pt]

    return _stage(run, "evaluate", settings, inputs, produce, force)


def load_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_pipeline(
    config: PipelineConfig,
    *,
    budgets: Sequence[int] | None = None,
    force: bool = False,
    embed_client: httpx.Client | None = None,
    complete_client: httpx.Client | None = None,
) -> list[Run]:
    """Run every stage; with ``budgets`` the history-dependent stages run once per budget.

    Returns one ``Run`` per budget (or a single run), recording which stages
    executed and which were skipped as unchanged.
    """
    base = Run(config)
    cmd_preprocess(base, force)
    cmd_embed(base, force, embed_client)
    runs = []
    for b in budgets or [None]:
        if b is None:
            run = base
        else:
            cfg = dataclasses.replace(config, retrieval=dataclasses.replace(config.retrieval, history_checkin_budget=b))
            run = Run(cfg, sweep_dir=base.workdir / f"budget_{b}")
            run.executed, run.skipped = list(base.executed), list(base.skipped)
        if run.config.retrieval_config().history_checkin_budget > 0:
            cmd_retrieve(run, force)
        cmd_emit(run, force)
        cmd_predict(run, force, complete_client)
        cmd_evaluate(run, force)
        runs.append(run)
    return runs
