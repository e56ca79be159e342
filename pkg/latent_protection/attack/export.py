from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from latent_protection.errors import BudgetViolation
from latent_protection.io.images import load_png, save_png, to_uint8

from .types import AdversarialExample

log = logging.getLogger("latent_protection.attack.export")


def integer_radius(zeta: float) -> int:
    return int(zeta * 255.0 + 1e-9)


def quantize_adversarial(example: AdversarialExample) -> tuple[np.ndarray, np.ndarray]:
    """
    8-bit (clean, adversarial) pair. Rounding may push a coordinate one level past the
    budget, so the adversarial image is projected onto the integer ball around the
    quantized clean image before the exact check.
    """
    clean_q = to_uint8(example.x_clean).astype(np.int16)
    adv_q = to_uint8(example.x_adv).astype(np.int16)
    k = integer_radius(example.zeta)
    adv_q = np.clip(adv_q, clean_q - k, clean_q + k)
    adv_q = np.clip(adv_q, 0, 255)
    verify_uint8_budget(clean_q, adv_q, k)
    return clean_q.astype(np.uint8), adv_q.astype(np.uint8)


def verify_uint8_budget(clean_q: np.ndarray, adv_q: np.ndarray, k: int) -> None:
    diff = int(np.abs(adv_q.astype(np.int16) - clean_q.astype(np.int16)).max()) if adv_q.size else 0
    if diff > k:
        raise BudgetViolation(f"8-bit l-inf distance {diff} exceeds integer budget {k}")


def export_adversarial_png(example: AdversarialExample, path: Path | str) -> Path:
    """Write the quantized adversarial image and re-verify the budget on what was written."""
    clean_q, adv_q = quantize_adversarial(example)
    out = save_png(adv_q, path)
    reread = np.rint(load_png(out).permute(1, 2, 0).double().numpy() * 255.0).astype(np.int16)
    verify_uint8_budget(clean_q, reread, integer_radius(example.zeta))
    log.debug("exported %s (8-bit budget %d)", out, integer_radius(example.zeta))
    return out
