"""Solve per-cell refill-latency parameters from target no-OTPK rates.

Model of one depletion cycle under a synchronous attacker (one request in
flight, round trip ``tau``; after an empty bundle it waits ``empty_poll``
before asking again):

* the refill lands at time 0 and the attacker's next pop comes ``W`` later;
* the notification fires on pop number ``batch - trigger``;
* the device answers ``delta = r + D`` later, where ``r`` is its round trip
  and ``D ~ LogNormal(mu, sigma)`` the device-side reaction time;
* the last ``trigger`` keys last ``trigger * tau``, so the store sits empty
  for ``max(0, delta - trigger * tau)``.

The success rate an initiator sees at a uniformly random instant is the
long-run empty fraction ``E[empty] / E[cycle]``.

Run ``python -m prekeysim.calibration`` to print the table that ships in
``data/profiles.yaml``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.optimize import brentq
from scipy.stats import norm


@dataclass(frozen=True)
class CycleTiming:
    tau_s: float = 0.060          # attacker RTT 50 ms + idle service 10 ms
    empty_poll_s: float = 1.0
    batch: int = 812
    trigger: int = 10


def _partial_mean(mu: float, sigma: float, c: float) -> tuple[float, float]:
    """(E[max(0, D - c)], P[D > c]) for D ~ LogNormal(mu, sigma)."""
    mean = math.exp(mu + sigma * sigma / 2)
    if c <= 0:
        return mean - c, 1.0
    d2 = (mu - math.log(c)) / sigma
    return mean * norm.cdf(d2 + sigma) - c * norm.cdf(d2), norm.cdf(d2)


def _cycle_terms(mu: float, sigma: float, device_rtt_s: float, timing: CycleTiming) -> tuple[float, float]:
    c = timing.trigger * timing.tau_s - device_rtt_s
    excess, p_empty = _partial_mean(mu, sigma, c)
    mean_delta = device_rtt_s + math.exp(mu + sigma * sigma / 2)
    wait = timing.tau_s / 2 + p_empty * timing.empty_poll_s / 2
    cycle = wait + (timing.batch - timing.trigger - 1) * timing.tau_s + mean_delta
    return excess, cycle


def empty_fraction(mu: float, sigma: float, device_rtt_s: float, timing: CycleTiming = CycleTiming()) -> float:
    excess, cycle = _cycle_terms(mu, sigma, device_rtt_s, timing)
    return excess / cycle


def mean_cycle_s(mu: float, sigma: float, device_rtt_s: float, timing: CycleTiming = CycleTiming()) -> float:
    """Expected time between two refills under continuous depletion."""
    return _cycle_terms(mu, sigma, device_rtt_s, timing)[1]


def solve_mu(target: float, sigma: float, device_rtt_s: float, timing: CycleTiming = CycleTiming()) -> float:
    if not 0.0 < target < 1.0:
        raise ValueError("target rate must lie strictly between 0 and 1")
    return brentq(lambda mu: empty_fraction(mu, sigma, device_rtt_s, timing) - target, -12.0, 12.0, xtol=1e-10)


def main() -> None:  # pragma: no cover - maintenance helper
    from .devices import load_catalog

    catalog = load_catalog()
    rtts = {"wifi": 0.030, "cellular": 0.070}
    for name, hw in catalog.hardware.items():
        for cell_name, cell in hw.cells.items():
            link = cell_name.rsplit("-", 1)[1]
            mu = solve_mu(cell.target, cell.sigma, rtts[link])
            print(f"{name:12s} {cell_name:20s} target={cell.target:.2f} mu={mu:.6f}")


if __name__ == "__main__":  # pragma: no cover
    main()
