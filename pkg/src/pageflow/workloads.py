"""Built-in workloads over the shipped IR corpus.

Each workload pairs an IR program with a driver: a seeded input generator and
the job submission sequence (with per-job parameters such as weights, centers,
or ranks). Inputs can also be read from whitespace-delimited text files: one
token per whitespace for wc, one point per line for lr/kmeans, one edge pair
per line for pr.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional

from . import engine, ir
from .engine import EngineState, RunConfig, execute_job, plan_job
from .interp import OracleTrace


def load_program(name: str) -> ir.Program:
    text = (resources.files("pageflow") / "programs" / f"{name}.ir").read_text()
    prog = ir.parse_program(text)
    prog.analysis()
    return prog


def corpus_path(name: str) -> str:
    return str(resources.files("pageflow") / "programs" / f"{name}.ir")


@dataclass
class RunReport:
    workload: str
    config: dict
    digest: str
    summary: dict
    samples: list[dict] = field(default_factory=list)
    outputs: list = field(default_factory=list)
    elapsed_s: float = 0.0

    def summary_record(self) -> dict:
        rec = {
            "event": "summary",
            "workload": self.workload,
            "config": self.config,
            "digest": self.digest,
        }
        rec.update(self.summary)
        return rec

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for s in self.samples:
                fh.write(json.dumps({"event": "sample", **s}, sort_keys=True) + "\n")
            rec = self.summary_record()
            rec["elapsed_s"] = self.elapsed_s
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Driver:
    """One workload: program + input generator + job sequence."""

    name = ""
    program_name = ""
    default_scale: dict = {}

    def generate(self, seed: int, scale: dict) -> dict[str, list]:
        raise NotImplementedError

    def run_jobs(self, state: EngineState, inputs: dict[str, list], scale: dict) -> None:
        """Submit jobs in order; implementations call self.submit per job."""
        raise NotImplementedError

    # -- shared driver plumbing

    def submit(self, state: EngineState, job_name: str, inputs: dict, params=None) -> list:
        prog = state.prog
        job = prog.jobs[job_name]
        plan = plan_job(job, prog, state)
        self.submissions.append((state.submission + 1, job_name, plan.report))
        self.plans.append(plan)
        records = execute_job(state, job, plan, inputs, params)
        self.outputs.extend(records)
        return records

    def execute(self, config: RunConfig, scale: Optional[dict] = None) -> RunReport:
        import time

        scale = {**self.default_scale, **(scale or {})}
        prog = load_program(self.program_name)
        state = EngineState(prog, config)
        self.submissions: list = []
        self.plans: list = []
        self.outputs: list = []
        inputs = self.generate(config.seed, scale)
        t0 = time.perf_counter()
        self.run_jobs(state, inputs, scale)
        elapsed = time.perf_counter() - t0
        # every container lifetime has ended: nothing may hold pages
        for cid in list(state.cache_blocks):
            engine._unpersist(state, cid)
        if state.store.live_pages != 0:
            raise engine.RuntimeFailure(
                f"{state.store.live_pages} pages still live at run end"
            )
        report = RunReport(
            workload=self.name,
            config={
                "mode": config.mode,
                "page_capacity": config.page_capacity,
                "budget": config.budget,
                "cache_fraction": config.cache_fraction,
                "partitions": config.partitions,
                "threads": config.threads,
                "seed": config.seed,
                "scale": {k: scale[k] for k in sorted(scale)},
            },
            digest=state.digest(),
            summary=state.metrics.summary(state),
            samples=state.metrics.samples,
            elapsed_s=elapsed,
        )
        self.state = state
        return report

    def oracle(self, seed: int, scale: Optional[dict] = None) -> tuple[list, OracleTrace]:
        """Object-mode run with size tracing; returns (submissions, trace)."""
        scale = {**self.default_scale, **(scale or {})}
        prog = load_program(self.program_name)
        config = RunConfig(mode="object", seed=seed)
        state = EngineState(prog, config)
        trace = state.rt.start_trace()
        self.submissions = []
        self.plans = []
        self.outputs = []
        inputs = self.generate(seed, scale)
        self.run_jobs(state, inputs, scale)
        for cid in list(state.cache_blocks):
            engine._unpersist(state, cid)
        state.rt.stop_trace()
        self.state = state
        return self.submissions, trace

    def digest_extra(self, state: EngineState, value) -> None:
        state.outputs_hash.update(engine.canonical_bytes(value, state.prog))


class WordCount(Driver):
    """n tokens drawn uniformly from `keys` distinct words ("w0".."w{k-1}")."""

    name = "wc"
    program_name = "wc"
    default_scale = {"n": 100_000, "keys": 1000}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        k = scale["keys"]
        return {"tokens": [f"w{rng.randrange(k)}" for _ in range(scale["n"])]}

    def run_jobs(self, state, inputs, scale):
        self.submit(state, "wordcount", inputs)


class LogisticRegression(Driver):
    """n rows of a +/-1 label (fair coin) and 10 uniform [-1, 1) features;
    initial weights are uniform [-1, 1) from seed+1."""

    name = "lr"
    program_name = "lr"
    default_scale = {"n": 10_000, "iters": 30}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        rows = []
        for _ in range(scale["n"]):
            label = 1.0 if rng.random() < 0.5 else -1.0
            rows.append([label] + [rng.uniform(-1.0, 1.0) for _ in range(10)])
        return {"rows": rows}

    def run_jobs(self, state, inputs, scale):
        rng = random.Random(state.config.seed + 1)
        weights = [2.0 * rng.random() - 1.0 for _ in range(10)]
        n = max(scale["n"], 1)
        self.submit(state, "load", inputs)
        for _ in range(scale["iters"]):
            out = self.submit(state, "iterate", {}, params=[weights])
            gradient = out[0]
            weights = [w - g / n for w, g in zip(weights, gradient)]
        self.weights = weights
        self.digest_extra(state, weights)


class KMeans(Driver):
    """n points uniform in [0, 1)^10; k initial centers from seed+1."""

    name = "kmeans"
    program_name = "kmeans"
    default_scale = {"n": 10_000, "k": 8, "iters": 5}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        return {"rows": [[rng.random() for _ in range(10)] for _ in range(scale["n"])]}

    def run_jobs(self, state, inputs, scale):
        rng = random.Random(state.config.seed + 1)
        k = scale["k"]
        centers = [[rng.random() for _ in range(10)] for _ in range(k)]
        self.submit(state, "load", inputs)
        for _ in range(scale["iters"]):
            out = self.submit(state, "step", {}, params=[centers])
            new_centers = [list(c) for c in centers]
            for cluster, acc in out:
                count = acc.count
                new_centers[cluster] = [s / count for s in acc.sums]
            centers = new_centers
        self.centers = centers
        self.digest_extra(state, centers)


class PageRank(Driver):
    """Uniform random edges over edges/5 vertices (self-loops and duplicates
    allowed); ranks start at 1.0 and damp by 0.85 with a 0.15 base."""

    name = "pr"
    program_name = "pr"
    default_scale = {"edges": 10_000, "iters": 10}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        e = scale["edges"]
        v = scale.get("vertices", max(4, e // 5))
        self.vertices = v
        return {"edges": [[rng.randrange(v), rng.randrange(v)] for _ in range(e)]}

    def run_jobs(self, state, inputs, scale):
        v = self.vertices
        ranks = [1.0] * v
        self.submit(state, "build", inputs)
        for _ in range(scale["iters"]):
            out = self.submit(state, "rank", {}, params=[ranks])
            new_ranks = [0.15] * v
            for vertex, total in out:
                new_ranks[vertex] = 0.15 + 0.85 * total
            ranks = new_ranks
        self.ranks = ranks
        self.digest_extra(state, ranks)


class SortCached(Driver):
    name = "sortcache"
    program_name = "sortcache"
    default_scale = {"n": 5000, "key_range": 500}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        return {
            "rows": [
                [rng.randrange(scale["key_range"]), rng.randrange(1 << 30)]
                for _ in range(scale["n"])
            ]
        }

    def run_jobs(self, state, inputs, scale):
        self.submit(state, "load", inputs)
        self.submit(state, "sort", {})


class CopyCached(Driver):
    name = "copycache"
    program_name = "copycache"
    default_scale = {"n": 2000}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        return {"rows": [[rng.random(), rng.random()] for _ in range(scale["n"])]}

    def run_jobs(self, state, inputs, scale):
        self.submit(state, "load", inputs)
        self.submit(state, "copy", {})
        self.submit(state, "read", {})
        self.submit(state, "drop", {})


class GrowCached(Driver):
    name = "grow"
    program_name = "grow"
    default_scale = {"n": 2000}

    def generate(self, seed, scale):
        rng = random.Random(seed)
        return {"rows": [[rng.randrange(1000) for _ in range(4)] for _ in range(scale["n"])]}

    def run_jobs(self, state, inputs, scale):
        self.submit(state, "load", inputs)
        self.submit(state, "grow", {})
        self.submit(state, "total", {})


DRIVERS: dict[str, Callable[[], Driver]] = {
    "wc": WordCount,
    "lr": LogisticRegression,
    "kmeans": KMeans,
    "pr": PageRank,
    "sortcache": SortCached,
    "copycache": CopyCached,
    "grow": GrowCached,
}


def make_driver(name: str) -> Driver:
    if name not in DRIVERS:
        raise engine.ConfigError(
            f"unknown workload {name!r}; available: {', '.join(sorted(DRIVERS))}"
        )
    return DRIVERS[name]()


def run_workload(name: str, config: RunConfig, scale: Optional[dict] = None) -> RunReport:
    return make_driver(name).execute(config, scale)


def read_text_input(name: str, path: str) -> dict[str, list]:
    """Whitespace-delimited file inputs: wc wants tokens, lr/kmeans one point
    per line, pr one edge pair per line."""
    with open(path) as fh:
        if name == "wc":
            return {"tokens": fh.read().split()}
        if name == "lr":
            return {"rows": [[float(x) for x in line.split()] for line in fh if line.strip()]}
        if name == "kmeans":
            return {"rows": [[float(x) for x in line.split()] for line in fh if line.strip()]}
        if name == "pr":
            return {"edges": [[int(x) for x in line.split()] for line in fh if line.strip()]}
    raise engine.ConfigError(f"file input is not defined for workload {name!r}")
