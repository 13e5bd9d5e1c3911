"""Smart-meter state machine: samples household power, emits compact frames.

The meter is driven by `step(power_w, t)` once per tick.  Each call covers
the half-open interval [t, t + tick_s) and may emit:

    T2  when the power crosses one or more k*Pn/10 band thresholds,
    T3  on exceeding the contractual power Pn (and on return below it),
        or once when cumulative energy passes a configured threshold,
    T1  when the tick closes a quarter hour (energy of that quarter),
    T4  when the meter itself opens the breaker after a sustained overrun.

Overrun handling: while the power stays above `overrun_factor * pn_w` the
meter counts down to a supply cut.  The allowed time is inversely
proportional to the excess,

    remaining = switchoff_tau_s * pn_w / (power - overrun_factor * pn_w)

so a small overrun is tolerated for tens of minutes while a doubled load is
cut within a few minutes.  The deadline only tightens while the overrun
persists (taking the minimum of the armed deadline and the one implied by
the current sample) and is dropped as soon as the power returns below the
reference.

A distributor-issued emergency limit (`arm_emergency_limit`) replaces the
reference: while armed, the countdown uses

    remaining = switchoff_tau_s * limit_w / (power - limit_w)

with no tolerance factor on the limit itself.

All frames share one gapless sequence counter starting at 1, so a receiver
can detect channel losses as sequence gaps regardless of frame type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from chain2sim.frames import (
    CompactFrame,
    CrossingDirection,
    EnergyDirection,
    ExceedanceCause,
    FrameType,
    SupplyEventKind,
    T1Payload,
    T2Payload,
    T3Payload,
    T4Payload,
)

QUARTER_S = 900
QUARTERS_PER_DAY = 96


def band_index(power_w: float, pn_w: float) -> int:
    """Band of a power sample: floor(10 * P / Pn), clamped to [0, 10].

    Band k means the power sits between thresholds k*Pn/10 and (k+1)*Pn/10;
    band 10 collects everything at or above Pn.
    """
    k = math.floor((10.0 * power_w) / pn_w)
    if k < 0:
        return 0
    if k > 10:
        return 10
    return k


def switchoff_remaining(
    power_w: float,
    pn_w: float,
    *,
    overrun_factor: float = 1.1,
    tau_s: float = 180.0,
) -> float | None:
    """Seconds until the breaker would open at a steady `power_w`.

    Returns None when the power is at or below the tolerated reference
    `overrun_factor * pn_w` (no countdown).  The remaining time is inversely
    proportional to the excess over that reference.
    """
    reference = overrun_factor * pn_w
    if power_w <= reference:
        return None
    return tau_s * pn_w / (power_w - reference)


@dataclass(frozen=True)
class MeterConfig:
    """Static parameters of one meter.

    pn_w: contractual power in watts.
    overrun_factor: tolerated fraction of pn_w before the cut countdown arms.
    switchoff_tau_s: time constant of the cut countdown (seconds).
    energy_threshold_wh: optional cumulative-energy alarm level; the meter
        sends a single T3 when lifetime energy first reaches it.
    tick_s: sampling period in whole seconds; must divide the 900 s quarter.
    direction: which flow the T1 quarters account (a plain consumer meter
        reports withdrawn energy, a production meter reports fed-in energy).
    """

    pn_w: float
    overrun_factor: float = 1.1
    switchoff_tau_s: float = 180.0
    energy_threshold_wh: float | None = None
    tick_s: int = 1
    direction: EnergyDirection = EnergyDirection.WITHDRAWN

    def __post_init__(self) -> None:
        if self.pn_w <= 0:
            raise ValueError(f"pn_w must be positive, got {self.pn_w}")
        if self.overrun_factor < 1.0:
            raise ValueError(
                f"overrun_factor must be >= 1, got {self.overrun_factor}"
            )
        if self.switchoff_tau_s <= 0:
            raise ValueError(
                f"switchoff_tau_s must be positive, got {self.switchoff_tau_s}"
            )
        if self.energy_threshold_wh is not None and self.energy_threshold_wh <= 0:
            raise ValueError(
                f"energy_threshold_wh must be positive, got {self.energy_threshold_wh}"
            )
        if not isinstance(self.tick_s, int) or self.tick_s < 1:
            raise ValueError(f"tick_s must be a positive integer, got {self.tick_s}")
        if QUARTER_S % self.tick_s != 0:
            raise ValueError(
                f"tick_s must divide {QUARTER_S} s, got {self.tick_s}"
            )


class Meter:
    """One metering point.

    Drive it with `step(power_w, t)` at a fixed cadence; inject network-side
    supply events with `apply_supply_event`; apply a distributor emergency
    power limit with `arm_emergency_limit`.  Emitted frames are returned to
    the caller, never sent anywhere by the meter itself.
    """

    def __init__(self, pod_id: str, config: MeterConfig) -> None:
        self.pod_id = pod_id
        self.config = config
        self.supply_on = True
        self.total_reported_wh = 0
        self._seq = 0
        self._next_t: int | None = None
        self._band = 0
        self._over_pn = False
        self._cut_deadline: float | None = None
        self._quarter_acc_ws = 0.0
        self._total_acc_ws = 0.0
        self._energy_alarm_sent = False
        self._interruption_started_at: int | None = None
        self._em_limit_w: float | None = None
        self._em_until: float | None = None

    # -- frame helpers ---------------------------------------------------

    def _emit(self, frame_type: FrameType, t: int, payload) -> CompactFrame:
        self._seq += 1
        return CompactFrame(frame_type, self.pod_id, self._seq, t, payload)

    @property
    def last_seq(self) -> int:
        """Sequence number of the most recently emitted frame (0 if none)."""
        return self._seq

    @property
    def cut_deadline(self) -> float | None:
        return self._cut_deadline

    @property
    def emergency_limit_w(self) -> float | None:
        return self._em_limit_w

    # -- emergency limit ---------------------------------------------------

    def arm_emergency_limit(self, limit_w: float, until_s: float) -> None:
        """Lower the cut reference to `limit_w` until scenario time `until_s`.

        While armed, the overrun countdown runs against the limit itself
        (no tolerance factor); an already armed cut deadline is dropped so
        the countdown restarts against the new reference.
        """
        if limit_w <= 0:
            raise ValueError(f"limit_w must be positive, got {limit_w}")
        self._em_limit_w = float(limit_w)
        self._em_until = float(until_s)
        self._cut_deadline = None

    def clear_emergency_limit(self) -> None:
        if self._em_limit_w is not None:
            self._em_limit_w = None
            self._em_until = None
            self._cut_deadline = None

    # -- supply events -----------------------------------------------------

    def apply_supply_event(self, t: int, kind: SupplyEventKind) -> list[CompactFrame]:
        """Inject a network-side supply event; returns the frames it causes.

        Interruption start/end toggle `supply_on` and are idempotent: a
        start while already off (or an end while on) emits nothing.  The
        end frame carries the outage duration.
        """
        kind = SupplyEventKind(kind)
        if kind is SupplyEventKind.INTERRUPTION_START:
            if not self.supply_on:
                return []
            self.supply_on = False
            self._interruption_started_at = t
            self._cut_deadline = None
            return [self._emit(FrameType.T4, t, T4Payload(kind))]
        if kind is SupplyEventKind.INTERRUPTION_END:
            if self.supply_on:
                return []
            started = self._interruption_started_at
            duration = 0 if started is None else max(0, t - started)
            self.supply_on = True
            self._interruption_started_at = None
            return [self._emit(FrameType.T4, t, T4Payload(kind, duration))]
        return [self._emit(FrameType.T4, t, T4Payload(kind))]

    # -- main sampling entry point ------------------------------------------

    def step(self, power_w: float, t: int) -> list[CompactFrame]:
        """Advance one tick covering [t, t + tick_s); returns emitted frames.

        `t` must be tick-aligned and strictly consecutive with the previous
        call.  `power_w` is the mean household power over the tick.
        """
        cfg = self.config
        tick = cfg.tick_s
        if power_w < 0:
            raise ValueError(f"power_w must be non-negative, got {power_w}")
        if self._next_t is None:
            if t % tick != 0:
                raise ValueError(f"t={t} is not aligned to tick_s={tick}")
        elif t != self._next_t:
            raise ValueError(f"expected step at t={self._next_t}, got t={t}")
        self._next_t = t + tick

        frames: list[CompactFrame] = []

        # Emergency limit expires on its own.
        if self._em_until is not None and t >= self._em_until:
            self.clear_emergency_limit()

        # A cut armed earlier falls due: open the breaker before sampling.
        if (
            self._cut_deadline is not None
            and t >= self._cut_deadline
            and self.supply_on
        ):
            self.supply_on = False
            self._interruption_started_at = t
            self._cut_deadline = None
            frames.append(
                self._emit(
                    FrameType.T4, t, T4Payload(SupplyEventKind.INTERRUPTION_START)
                )
            )

        p_eff = power_w if self.supply_on else 0.0

        # Band crossings.  One frame per threshold passed, in crossing order.
        new_band = band_index(p_eff, cfg.pn_w)
        old_band = self._band
        if new_band != old_band:
            power_int = round(p_eff)
            if new_band > old_band:
                for k in range(old_band + 1, new_band + 1):
                    frames.append(
                        self._emit(
                            FrameType.T2,
                            t,
                            T2Payload(k, power_int, CrossingDirection.UP),
                        )
                    )
            else:
                for k in range(old_band, new_band, -1):
                    frames.append(
                        self._emit(
                            FrameType.T2,
                            t,
                            T2Payload(k, power_int, CrossingDirection.DOWN),
                        )
                    )
            self._band = new_band

        # Overrun countdown against the active reference.
        if self._em_limit_w is not None:
            remaining = switchoff_remaining(
                p_eff, self._em_limit_w, overrun_factor=1.0, tau_s=cfg.switchoff_tau_s
            )
        else:
            remaining = switchoff_remaining(
                p_eff,
                cfg.pn_w,
                overrun_factor=cfg.overrun_factor,
                tau_s=cfg.switchoff_tau_s,
            )
        if remaining is None:
            self._cut_deadline = None
        else:
            candidate = t + remaining
            if self._cut_deadline is None or candidate < self._cut_deadline:
                self._cut_deadline = candidate

        # Contractual-power exceedance is edge triggered on Pn itself.
        if p_eff > cfg.pn_w:
            if not self._over_pn:
                self._over_pn = True
                frames.append(
                    self._emit(
                        FrameType.T3,
                        t,
                        T3Payload(ExceedanceCause.POWER_EXCEEDED, round(p_eff)),
                    )
                )
        elif self._over_pn:
            self._over_pn = False
            frames.append(
                self._emit(
                    FrameType.T3,
                    t,
                    T3Payload(ExceedanceCause.RESTORED, round(p_eff)),
                )
            )

        # Energy accounting.
        ws = p_eff * tick
        self._quarter_acc_ws += ws
        self._total_acc_ws += ws
        if (
            cfg.energy_threshold_wh is not None
            and not self._energy_alarm_sent
            and self._total_acc_ws / 3600.0 >= cfg.energy_threshold_wh
        ):
            self._energy_alarm_sent = True
            frames.append(
                self._emit(
                    FrameType.T3,
                    t,
                    T3Payload(
                        ExceedanceCause.ENERGY_THRESHOLD_EXCEEDED,
                        round(self._total_acc_ws / 3600.0),
                    ),
                )
            )

        t_close = t + tick
        if t_close % QUARTER_S == 0:
            energy_wh = round(self._quarter_acc_ws / 3600.0)
            self._quarter_acc_ws = 0.0
            self.total_reported_wh += energy_wh
            quarter = (t_close // QUARTER_S - 1) % QUARTERS_PER_DAY
            frames.append(
                self._emit(
                    FrameType.T1,
                    t_close,
                    T1Payload(quarter, energy_wh, cfg.direction),
                )
            )
        return frames
