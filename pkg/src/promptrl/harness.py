"""Experiment runner: single runs, the four-way reward ablation, and reports.

A run builds the vocabulary and scenarios, generates the supervised corpus
from the oracle, trains the two stages, then evaluates the final policy
greedily on a held-out scenario set. Identical config and seed give
byte-identical log CSVs regardless of parallelism degree or whether scoring
goes through the wire protocol.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import grpo as G
from . import policy as P
from .protocol import EvaluatorClient, ScoreRequest, connect_tcp, evaluate_request
from .reward import (MODE_DYNAMIC, MODE_PC_ONLY, MODE_SA_ONLY, MODE_STATIC, SCHEDULE_MODES,
                     CurriculumSchedule, MetricsSummary, RewardScore, summarize)
from .seeding import (STREAM_EVAL_SCENARIO, STREAM_POLICY_INIT, STREAM_QUERY_INTENT,
                      STREAM_SFT_SCENARIO, derive_rng)
from .synthenv import EnvConfig, EnvWeights, make_sft_corpus, score
from .tokens import TokenSeq, Vocab, build_vocab, sample_scenario

logger = logging.getLogger(__name__)

ABLATION_MODE_ORDER = (MODE_SA_ONLY, MODE_PC_ONLY, MODE_STATIC, MODE_DYNAMIC)

RUN_RECORD_VERSION = 1


def _check_keys(section: str, doc: dict, allowed: set[str]) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {section}: {sorted(unknown)}")


@dataclass(frozen=True)
class EnvSection:
    n_intent: int = 4
    n_physics: int = 8
    n_distractor: int = 8
    n_classes: int = 2
    k: int = 4
    max_len: int = 5
    noise_sigma: float = 0.25
    vocab_seed: int = 7
    weights: EnvWeights = field(default_factory=EnvWeights)


@dataclass(frozen=True)
class PolicySection:
    context_dim: int = 16
    init_scale: float = 0.05


@dataclass(frozen=True)
class SftSection:
    enabled: bool = True
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-2
    warmup_frac: float = 0.05
    clip_norm: float = 1.0
    corpus_size: int = 64


@dataclass(frozen=True)
class GrpoSection:
    group_size: int = 4
    batch_size: int = 8
    epsilon: float = 0.2
    beta: float = 0.01
    total_steps: int = 400
    lr: float = 5e-3
    max_grad_norm: float = 20.0
    ref_mode: str = G.REF_SFT_INIT
    advantage_norm: str = G.ADV_MEAN_ONLY
    inner_epochs: int = 1

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def to_config(self) -> G.GrpoConfig:
        return G.GrpoConfig(group_size=self.group_size, batch_size=self.batch_size,
                            epsilon=self.epsilon, beta=self.beta,
                            total_steps=self.total_steps, lr=self.lr,
                            max_grad_norm=self.max_grad_norm, ref_mode=self.ref_mode,
                            advantage_norm=self.advantage_norm,
                            inner_epochs=self.inner_epochs)


@dataclass(frozen=True)
class ScheduleSection:
    mode: str = MODE_DYNAMIC
    alpha: float = 3.0

    def __post_init__(self) -> None:
        if self.mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule mode must be one of {SCHEDULE_MODES}")


@dataclass(frozen=True)
class EvalSection:
    heldout: int = 200
    threshold: float = 4.0


@dataclass(frozen=True)
class ScorerSection:
    kind: str = "inprocess"
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("inprocess", "protocol"):
            raise ValueError("scorer.kind must be 'inprocess' or 'protocol'")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    sft: SftSection = field(default_factory=SftSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    scorer: ScorerSection = field(default_factory=ScorerSection)
    parallelism: int = 1

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        _check_keys("config", doc, {"env", "policy", "sft", "grpo", "schedule",
                                    "eval", "scorer", "parallelism"})
        sections: dict = {}
        for name, typ in (("env", EnvSection), ("policy", PolicySection),
                          ("sft", SftSection), ("grpo", GrpoSection),
                          ("schedule", ScheduleSection), ("eval", EvalSection),
                          ("scorer", ScorerSection)):
            sub = dict(doc.get(name, {}))
            allowed = {f.name for f in dataclasses.fields(typ)}
            _check_keys(name, sub, allowed)
            if name == "env" and "weights" in sub:
                sub["weights"] = EnvWeights(**sub["weights"])
            sections[name] = typ(**sub)
        return cls(parallelism=int(doc.get("parallelism", 1)), **sections)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return dataclasses.replace(self, schedule=dataclasses.replace(self.schedule, mode=mode))

    def build_vocab(self) -> Vocab:
        e = self.env
        return build_vocab(e.n_intent, e.n_physics, e.n_distractor, e.n_classes,
                           seed=e.vocab_seed)

    def build_env_config(self, vocab: Vocab) -> EnvConfig:
        e = self.env
        return EnvConfig(vocab=vocab, k=e.k, max_len=e.max_len,
                         noise_sigma=e.noise_sigma, weights=e.weights)


class LocalScorer:
    """In-process scorer; same request semantics as the wire evaluator."""

    def __init__(self, env_config: EnvConfig):
        self._config = env_config

    def score_batch(self, jobs: Sequence[G.ScoreJob]) -> list[RewardScore]:
        out = []
        for job in jobs:
            req = ScoreRequest(id=job.request_id, original=job.query,
                               rewritten=job.candidate, step=job.step)
            resp = evaluate_request(self._config, req)
            out.append(RewardScore(sa=resp.sa, pc=resp.pc))
        return out


class ProtocolScorer:
    """Scorer backed by a protocol connection to a running evaluator."""

    def __init__(self, client: EvaluatorClient, timeout: float = 30.0):
        self._client = client
        self._timeout = timeout

    def score_batch(self, jobs: Sequence[G.ScoreJob]) -> list[RewardScore]:
        requests = [ScoreRequest(id=j.request_id, original=j.query,
                                 rewritten=j.candidate, step=j.step) for j in jobs]
        responses = self._client.score_batch(requests, timeout=self._timeout)
        return [RewardScore(sa=r.sa, pc=r.pc) for r in responses]


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    mode: str
    status: str                      # "completed" or "failed"
    duration_s: float
    log: list[G.StepLog]
    metrics: MetricsSummary | None
    sft_epoch_losses: list[float]
    failure: str | None = None
    checkpoint_path: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "version": RUN_RECORD_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "mode": self.mode,
            "status": self.status,
            "duration_s": self.duration_s,
            "metrics": dataclasses.asdict(self.metrics) if self.metrics else None,
            "sft_epoch_losses": self.sft_epoch_losses,
            "failure": self.failure,
            "checkpoint_path": self.checkpoint_path,
            "total_steps": len(self.log),
        }


def log_csv_text(log: Sequence[G.StepLog]) -> str:
    lines = [G.RUN_LOG_HEADER]
    lines.extend(row.csv_row() for row in log)
    return "\n".join(lines) + "\n"


def parse_log_csv(text: str) -> list[G.StepLog]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != G.RUN_LOG_HEADER:
        raise ValueError("log CSV header mismatch")
    out = []
    for line in lines[1:]:
        parts = line.split(",")
        out.append(G.StepLog(step=int(parts[0]), mean_reward=float(parts[1]),
                             mean_sa=float(parts[2]), mean_pc=float(parts[3]),
                             w_sa=float(parts[4]), w_pc=float(parts[5]),
                             kl=float(parts[6]), grad_norm=float(parts[7]),
                             lr=float(parts[8])))
    return out


def rollout_queries(config: ExperimentConfig, vocab: Vocab, seed: int,
                    step: int) -> list[TokenSeq]:
    """The B rollout prompts for one step.

    Intent sets are drawn from per-(step, slot) streams; the scenario class is
    not sampled here — it is a pure function of the query serial, shared with
    the evaluator side (see seeding.class_for_query).
    """
    e = config.env
    intent_pool = vocab.intent_ids
    prompts: list[TokenSeq] = []
    for j in range(config.grpo.batch_size):
        if e.k == len(intent_pool):
            prompts.append(tuple(sorted(intent_pool)))
        else:
            rng = derive_rng(seed, STREAM_QUERY_INTENT, step, j)
            pick = rng.choice(len(intent_pool), size=e.k, replace=False)
            prompts.append(tuple(sorted(intent_pool[int(i)] for i in pick)))
    return prompts


def evaluate_policy(config: ExperimentConfig, env_config: EnvConfig,
                    params: P.PolicyParams, seed: int) -> MetricsSummary:
    """Greedy decoding on held-out scenarios, scored noiselessly."""
    vocab = env_config.vocab
    rng_greedy = derive_rng(seed, 0xE7A1)  # unused at temperature 0
    scores: list[RewardScore] = []
    for i in range(config.eval.heldout):
        scenario = sample_scenario(vocab, config.env.k,
                                   derive_rng(seed, STREAM_EVAL_SCENARIO, i))
        rewrite = P.sample(params, scenario.prompt, rng_greedy, temperature=0.0)
        sc, _ = score(env_config, scenario, rewrite, rng=None)
        scores.append(sc)
    return summarize(scores, threshold=config.eval.threshold)


def run(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None,
        ) -> RunRecord:
    """Execute the full pipeline for one seed.

    Stage aborts produce a partial record flagged failed, with the checkpoint
    path when one was written.
    """
    t0 = time.perf_counter()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    vocab = config.build_vocab()
    env_config = config.build_env_config(vocab)
    policy_cfg = P.PolicyConfig(vocab_size=vocab.size, max_len=config.env.max_len,
                                context_dim=config.policy.context_dim)
    params = P.init_params(policy_cfg, derive_rng(seed, STREAM_POLICY_INIT),
                           scale=config.policy.init_scale)

    record = RunRecord(config_hash=config.config_hash(), seed=seed,
                       mode=config.schedule.mode, status="completed", duration_s=0.0,
                       log=[], metrics=None, sft_epoch_losses=[])

    def checkpoint_on_diverge(p: P.PolicyParams, step: int) -> str | None:
        if out_path is None:
            return None
        path = out_path / f"policy_diverged_step{step}.json"
        P.save_checkpoint(p, path)
        _write_sidecar(path.with_suffix(".sidecar.json"), config, seed, step)
        return str(path)

    client = None
    try:
        if config.sft.enabled:
            scenarios = [sample_scenario(vocab, config.env.k,
                                         derive_rng(seed, STREAM_SFT_SCENARIO, i))
                         for i in range(config.sft.corpus_size)]
            corpus = make_sft_corpus(env_config, scenarios)
            s = config.sft
            result = P.sft_train(params, corpus,
                                 P.SftSettings(epochs=s.epochs, batch_size=s.batch_size,
                                               lr=s.lr, warmup_frac=s.warmup_frac,
                                               clip_norm=s.clip_norm), seed)
            params = result.params
            record.sft_epoch_losses = result.epoch_losses

        if config.grpo.total_steps >= 1:
            if config.scorer.kind == "protocol":
                client = connect_tcp(config.scorer.host, config.scorer.port)
                scorer: G.RolloutScorer = ProtocolScorer(client)
            else:
                scorer = LocalScorer(env_config)
            schedule = CurriculumSchedule(mode=config.schedule.mode,
                                          total_steps=config.grpo.total_steps,
                                          alpha=config.schedule.alpha)
            env = G.GrpoEnv(queries=lambda t: rollout_queries(config, vocab, seed, t),
                            scorer=scorer)
            grpo_result = G.train(params, config.grpo.to_config(), schedule, env,
                                  seed, parallelism=config.parallelism,
                                  on_diverge=checkpoint_on_diverge)
            params = grpo_result.params
            record.log = grpo_result.log

        record.metrics = evaluate_policy(config, env_config, params, seed)
    except Exception as err:  # noqa: BLE001 - any stage abort yields a partial record
        record.status = "failed"
        record.failure = f"{type(err).__name__}: {err}"
        record.checkpoint_path = getattr(err, "checkpoint_path", None)
        logger.error("run seed=%d failed: %s", seed, record.failure)
    finally:
        if client is not None:
            client.close()

    record.duration_s = time.perf_counter() - t0
    if out_path is not None:
        _write_run_artifacts(out_path, config, seed, params, record)
    return record


def _write_sidecar(path: Path, config: ExperimentConfig, seed: int, step: int) -> None:
    sidecar = {"step": step, "config_hash": config.config_hash(),
               "schedule": dataclasses.asdict(config.schedule), "rng_state": {"seed": seed}}
    path.write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def _write_run_artifacts(out_path: Path, config: ExperimentConfig, seed: int,
                         params: P.PolicyParams, record: RunRecord) -> None:
    (out_path / "log.csv").write_text(log_csv_text(record.log), encoding="utf-8")
    (out_path / "run.json").write_text(
        json.dumps(record.to_json_dict(), indent=2), encoding="utf-8")
    (out_path / "config.json").write_text(
        json.dumps(config.to_json_dict(), indent=2), encoding="utf-8")
    ckpt = out_path / "policy.json"
    P.save_checkpoint(params, ckpt)
    _write_sidecar(out_path / "policy.sidecar.json", config, seed,
                   len(record.log))


def moving_average(series: Sequence[float], window: int = 10) -> list[float]:
    """Trailing-window mean; the first window-1 entries average the prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not series:
        raise ValueError("series must be non-empty")
    out = []
    acc = 0.0
    for i, v in enumerate(series):
        acc += v
        if i >= window:
            acc -= series[i - window]
        out.append(acc / min(i + 1, window))
    return out


@dataclass
class AblationReport:
    rows: list[dict]                      # mode, medians, run counts
    runs: dict[str, list[RunRecord]]
    seeds: list[int]
    complete: bool

    def markdown_table(self) -> str:
        lines = ["| mode | median sa_pct | median pc_pct | median joint_pct | runs |",
                 "|---|---|---|---|---|"]
        for row in self.rows:
            def fmt(v):
                return "incomplete" if v is None else f"{v:.1f}"
            lines.append(f"| {row['mode']} | {fmt(row['median_sa_pct'])} | "
                         f"{fmt(row['median_pc_pct'])} | {fmt(row['median_joint_pct'])} | "
                         f"{row['completed']}/{row['total']} |")
        return "\n".join(lines) + "\n"


def ablate(config: ExperimentConfig, seeds: Sequence[int],
           out_dir: str | Path | None = None) -> AblationReport:
    """Run the four reward modes with matched seeds and report medians."""
    if not seeds:
        raise ValueError("need at least one seed")
    out_path = Path(out_dir) if out_dir is not None else None
    runs: dict[str, list[RunRecord]] = {}
    rows: list[dict] = []
    complete = True
    for mode in ABLATION_MODE_ORDER:
        mode_cfg = config.with_mode(mode)
        records = []
        for seed in seeds:
            run_dir = out_path / mode / f"seed{seed}" if out_path else None
            records.append(run(mode_cfg, seed, run_dir))
        runs[mode] = records
        ok = [r for r in records if r.status == "completed" and r.metrics is not None]
        if len(ok) < len(records):
            complete = False
        row = {"mode": mode, "completed": len(ok), "total": len(records)}
        for name in ("sa_pct", "pc_pct", "joint_pct"):
            row[f"median_{name}"] = (statistics.median(getattr(r.metrics, name) for r in ok)
                                     if ok else None)
        rows.append(row)
    report_obj = AblationReport(rows=rows, runs=runs, seeds=list(seeds), complete=complete)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "ablation.md").write_text(report_obj.markdown_table(), encoding="utf-8")
        (out_path / "ablation.json").write_text(
            json.dumps({"seeds": list(seeds), "rows": rows}, indent=2), encoding="utf-8")
    return report_obj


def report(runs_dir: str | Path, out_dir: str | Path,
           smoothing_window: int = 10) -> tuple[list[Path], list[str]]:
    """Aggregate run records into curve CSVs, a markdown table, and a summary.

    Returns (written paths, warnings). Corrupt records are listed as warnings
    and skipped; the report is still produced for the rest.
    """
    runs_path, out_path = Path(runs_dir), Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    by_mode: dict[str, list[tuple[dict, list[G.StepLog]]]] = {}

    for record_file in sorted(runs_path.rglob("run.json")):
        try:
            doc = json.loads(record_file.read_text(encoding="utf-8"))
            log = parse_log_csv((record_file.parent / "log.csv").read_text(encoding="utf-8"))
        except Exception as err:  # noqa: BLE001
            warnings.append(f"skipping corrupt record {record_file}: {err}")
            continue
        by_mode.setdefault(doc.get("mode", "unknown"), []).append((doc, log))

    written: list[Path] = []
    summary: dict = {"modes": {}, "warnings": warnings}
    for mode, entries in sorted(by_mode.items()):
        logs = [log for _, log in entries if log]
        if logs:
            steps = min(len(log) for log in logs)
            raw = [sum(log[t].mean_reward for log in logs) / len(logs) for t in range(steps)]
            smooth = moving_average(raw, smoothing_window)
            curve = out_path / f"curve_{mode}.csv"
            lines = ["step,raw,smoothed"]
            lines += [f"{t},{raw[t]!r},{smooth[t]!r}" for t in range(steps)]
            curve.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(curve)
        docs = [doc for doc, _ in entries]
        ok = [d for d in docs if d.get("status") == "completed" and d.get("metrics")]
        mode_summary = {"runs": len(docs), "completed": len(ok)}
        for name in ("sa_pct", "pc_pct", "joint_pct"):
            mode_summary[f"median_{name}"] = (
                statistics.median(d["metrics"][name] for d in ok) if ok else None)
        summary["modes"][mode] = mode_summary

    table_rows = []
    for mode in ABLATION_MODE_ORDER:
        if mode in summary["modes"]:
            m = summary["modes"][mode]
            table_rows.append({"mode": mode, "completed": m["completed"],
                               "total": m["runs"],
                               "median_sa_pct": m["median_sa_pct"],
                               "median_pc_pct": m["median_pc_pct"],
                               "median_joint_pct": m["median_joint_pct"]})
    if table_rows:
        md = AblationReport(rows=table_rows, runs={}, seeds=[], complete=not warnings)
        table_path = out_path / "ablation.md"
        table_path.write_text(md.markdown_table(), encoding="utf-8")
        written.append(table_path)

    summary_path = out_path / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    written.append(summary_path)
    return written, warnings
