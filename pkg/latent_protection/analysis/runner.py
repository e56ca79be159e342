from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import torch

from latent_protection.diffusion.autoencoder import AutoencoderBackend
from latent_protection.diffusion.protocols import EpsilonModel
from latent_protection.diffusion.types import NoiseSchedule
from latent_protection.errors import ConfigError
from latent_protection.seeding import derive_seed

from .estimators import accumulate_sampling_error, estimate_eps_adv, estimate_reverse_bias, estimate_sampling_bias
from .similarity import bootstrap_mean_interval, cosine, cosine_protocol, pairwise_consistency
from .types import BiasField, CosineReport

log = logging.getLogger("latent_protection.analysis.runner")


@dataclass
class AnalysisBundle:
    timesteps: list[int]
    eps_adv: dict[int, list[BiasField]] = field(default_factory=dict)
    sampling_bias: dict[int, list[BiasField]] = field(default_factory=dict)
    reverse_bias: dict[int, list[BiasField]] = field(default_factory=dict)
    sampling_error: list[BiasField] = field(default_factory=list)
    baseline_sampling_error: list[BiasField] = field(default_factory=list)
    reports: dict[str, CosineReport] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return sum(finite) / len(finite) if finite else math.nan


def analyze_run(
    theta: EpsilonModel,
    phi: EpsilonModel,
    clean: torch.Tensor,
    adv: torch.Tensor,
    holdout: torch.Tensor,
    *,
    backend: AutoencoderBackend,
    sched: NoiseSchedule,
    seed: int,
    timesteps: Sequence[int] = (100, 300, 500, 700, 900),
    mc: int = 64,
    theta_star: EpsilonModel | None = None,
    conds: Sequence[int] | None = None,
    holdout_conds: Sequence[int] | None = None,
    progress_callback: Callable[[str, float, str], None] | None = None,
) -> AnalysisBundle:
    """
    Every diagnostic field at each probe timestep plus the cosine reports that tie them together.
    `clean`/`adv` are paired (N, C, H, W) sets; `holdout` images were not used to finetune phi.
    """
    progress = progress_callback or (lambda phase, frac, msg: None)
    if clean.shape != adv.shape:
        raise ConfigError(f"clean and adversarial sets differ in shape: {tuple(clean.shape)} vs {tuple(adv.shape)}")
    n, m = clean.shape[0], holdout.shape[0]
    cond_list = list(conds) if conds is not None else [0] * n
    hold_list = list(holdout_conds) if holdout_conds is not None else [0] * m
    probe = [min(int(t), sched.T - 1) for t in timesteps]
    bundle = AnalysisBundle(timesteps=probe)
    jobs = len(probe) * (n + m)
    done = 0
    for t in probe:
        bundle.eps_adv[t] = []
        bundle.reverse_bias[t] = []
        bundle.sampling_bias[t] = []
        for i in range(n):
            s = derive_seed(seed, f"image:{i}")
            bundle.eps_adv[t].append(estimate_eps_adv(theta, clean[i], adv[i], t, mc, backend, sched, s, cond=cond_list[i]))
            if theta_star is not None:
                bundle.reverse_bias[t].append(
                    estimate_reverse_bias(theta, theta_star, phi, clean[i], adv[i], t, mc, backend, sched, s, cond=cond_list[i])
                )
            done += 1
            progress("analyze", done / jobs, f"t={t} image {i + 1}/{n}")
        for j in range(m):
            s = derive_seed(seed, f"holdout:{j}")
            bundle.sampling_bias[t].append(estimate_sampling_bias(phi, holdout[j], t, mc, backend, sched, s, cond=hold_list[j]))
            done += 1
            progress("analyze", done / jobs, f"t={t} holdout {j + 1}/{m}")

    for j in range(m):
        bundle.sampling_error.append(accumulate_sampling_error({t: bundle.sampling_bias[t][j] for t in probe}, sched))
        if theta_star is not None:
            s = derive_seed(seed, f"holdout:{j}")
            baseline = {
                t: estimate_sampling_bias(theta_star, holdout[j], t, mc, backend, sched, s, cond=hold_list[j]) for t in probe
            }
            bundle.baseline_sampling_error.append(accumulate_sampling_error(baseline, sched))

    consistency: list[float] = []
    eps_vs_spl: list[float] = []
    rev_pairs: list[float] = []
    for t in probe:
        if m:
            rep = cosine_protocol(bundle.eps_adv[t], bundle.sampling_bias[t])
            bundle.reports[f"eps_adv_vs_sampling_bias@{t}"] = rep
            eps_vs_spl.append(rep.mean)
        if n > 1:
            rep = pairwise_consistency(bundle.eps_adv[t])
            bundle.reports[f"eps_adv_consistency@{t}"] = rep
            consistency.append(rep.mean)
        if bundle.reverse_bias[t]:
            rev_pairs.extend(cosine(b, e) for b, e in zip(bundle.reverse_bias[t], bundle.eps_adv[t]))

    summary: dict[str, Any] = {
        "timesteps": probe,
        "mc": int(mc),
        "images": n,
        "holdout": m,
        "eps_adv_vs_sampling_bias": _mean(eps_vs_spl),
        "eps_adv_consistency": _mean(consistency),
        "sampling_error_norm": _mean([f.norm() for f in bundle.sampling_error]),
    }
    if bundle.baseline_sampling_error:
        summary["baseline_sampling_error_norm"] = _mean([f.norm() for f in bundle.baseline_sampling_error])
    finite_rev = [v for v in rev_pairs if not math.isnan(v)]
    if finite_rev:
        mean, low, high = bootstrap_mean_interval(finite_rev, seed=derive_seed(seed, "bootstrap"))
        summary["reverse_bias_vs_eps_adv"] = {"mean": mean, "ci95": [low, high], "pairs": len(finite_rev)}
    bundle.summary = summary
    log.info(
        "analysis: cos(eps_adv, B_spl)=%.4f consistency=%.4f |eta_spl|=%.4f",
        summary["eps_adv_vs_sampling_bias"], summary["eps_adv_consistency"], summary["sampling_error_norm"],
    )
    return bundle
