"""Top-level verdict pipeline.

Order of business: structural validation, plan shrinking, stage
construction, stage discharge (serially or across worker processes), then a
single aggregated verdict. "proven" means every stage closed, so by
induction over checkpoints in topological order the parallel plan computes
the same values as the logical graph. "refuted" carries a confirmed witness
(or a structural tiling violation). Anything weaker is "unknown": timeouts,
solver failures, and countermodels that did not survive replay never turn
into a proof.
"""

from __future__ import annotations

import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass
from typing import Any

from .errors import GraphError, UncoveredNode
from .graph import validate_lineage
from .plan import Plan, dumps, loads
from .shapes import reduce_plan, validate_concrete
from .stages import StageResult, build_stages, run_stage


@dataclass
class VerifyOptions:
    jobs: int = 1
    no_reduce: bool = False
    objective: str = "l1"
    solver_argv: list[str] | None = None
    timeout_s: float = 60.0
    no_cancel: bool = False
    strict: bool = False


def _aggregate(results: list[StageResult], cancelled: int) -> str:
    statuses = {r.status for r in results}
    if "refuted" in statuses:
        return "refuted"
    if "unknown" in statuses or cancelled or not results:
        return "unknown"
    return "proven"


_plan_cache: dict[int, tuple[Plan, dict[str, Any]]] = {}


def _stage_task(blob: str, target: str, solver_argv: list[str] | None,
                timeout_s: float) -> StageResult:
    got = _plan_cache.get(hash(blob))
    if got is None:
        plan = loads(blob)
        stages, _ = build_stages(plan)
        got = (plan, {s.target: s for s in stages})
        _plan_cache[hash(blob)] = got
    plan, by_target = got
    return run_stage(plan, by_target[target], solver_argv, timeout_s)


def verify_plan(plan: Plan, opts: VerifyOptions | None = None) -> dict[str, Any]:
    opts = opts or VerifyOptions()
    t0 = time.perf_counter()
    report: dict[str, Any] = {"verdict": "unknown", "stages": [], "jobs": opts.jobs}
    if plan.parallel is None or plan.lineage is None:
        raise GraphError("plan has no parallel graph or no lineage")

    validate_concrete(plan.logical)
    validate_concrete(plan.parallel)
    problems = validate_lineage(plan.logical, plan.parallel, plan.lineage)
    tiling = [p for p in problems if "do not tile" in p]
    hard = [p for p in problems if "do not tile" not in p]
    if hard:
        raise GraphError("; ".join(hard))
    if tiling:
        # shard ranges overlap or leave gaps: no assignment of values can
        # make the claimed reconstruction work, so this refutes the plan
        report.update(verdict="refuted", refuted_by="structure", structure=tiling)
        report["wall_s"] = round(time.perf_counter() - t0, 6)
        return report

    work = plan
    if not opts.no_reduce:
        red = reduce_plan(plan, objective=opts.objective,
                          solver_argv=opts.solver_argv, timeout_s=opts.timeout_s)
        work = red.plan
        report["reduction"] = red.report

    stages, uncovered = build_stages(work)
    report["uncovered"] = uncovered
    loose = uncovered["parallel"] + uncovered["logical"]
    if loose:
        if opts.strict:
            raise UncoveredNode(loose)
        report["warning"] = (f"{len(loose)} node(s) feed no checkpoint and are "
                             f"not checked: {loose[:8]}")

    results: list[StageResult] = []
    cancelled = 0
    if opts.jobs > 1 and len(stages) > 1:
        blob = dumps(work)
        with ProcessPoolExecutor(max_workers=opts.jobs) as ex:
            pending = {ex.submit(_stage_task, blob, st.target,
                                 opts.solver_argv, opts.timeout_s)
                       for st in stages}
            try:
                while pending:
                    done, pending = wait(pending, return_when=FIRST_COMPLETED)
                    results.extend(f.result() for f in done)
                    if not opts.no_cancel and any(r.status == "refuted"
                                                  for r in results):
                        for f in pending:
                            f.cancel()
                        cancelled = len(stages) - len(results)
                        break
            finally:
                ex.shutdown(wait=True, cancel_futures=True)
        by_rank = {st.target: i for i, st in enumerate(stages)}
        results.sort(key=lambda r: by_rank[r.target])
    else:
        for st in stages:
            results.append(run_stage(work, st, opts.solver_argv, opts.timeout_s))
            if results[-1].status == "refuted" and not opts.no_cancel:
                cancelled = len(stages) - len(results)
                break

    verdict = _aggregate(results, cancelled)
    total_ob = sum(r.obligations for r in results)
    total_fast = sum(r.fastpath for r in results)
    report.update(
        verdict=verdict,
        stages=[asdict(r) for r in results],
        cancelled=cancelled,
        obligations=total_ob,
        fastpath_rate=round(total_fast / total_ob, 6) if total_ob else None,
        wall_s=round(time.perf_counter() - t0, 6),
    )
    if not stages:
        report["note"] = "lineage has no produced checkpoints; nothing was proven"
    for r in results:
        if r.status == "refuted":
            report["counterexample"] = {"target": r.target, **(r.detail or {})}
            break
    return report
