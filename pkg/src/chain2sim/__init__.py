"""Deterministic desk-scale simulator of a smart-meter post-metering channel.

The package models the full pipeline from household load to in-home display:
a meter samples power and emits compact telemetry frames (`chain2sim.meter`,
`chain2sim.frames`), a lossy low-rate power-line channel delays or drops them
(`chain2sim.channel`), a paired user device reconstructs consumption and
notifies the user (`chain2sim.device`), and optional automation layers act on
the result (`chain2sim.automation`).  `chain2sim.harness` wires these into
reproducible multi-user campaigns; `chain2sim.cli` exposes them as commands.

Everything is deterministic under a fixed seed: no wall clock, no global RNG.
"""

from chain2sim.frames import (
    CompactFrame,
    CrossingDirection,
    EnergyDirection,
    ExceedanceCause,
    FrameDecodeError,
    FrameEncodeError,
    FrameError,
    FrameType,
    SupplyEventKind,
    T1Payload,
    T2Payload,
    T3Payload,
    T4Payload,
    decode_frame,
    encode_frame,
)

__all__ = [
    "CompactFrame",
    "CrossingDirection",
    "EnergyDirection",
    "ExceedanceCause",
    "FrameDecodeError",
    "FrameEncodeError",
    "FrameError",
    "FrameType",
    "SupplyEventKind",
    "T1Payload",
    "T2Payload",
    "T3Payload",
    "T4Payload",
    "decode_frame",
    "encode_frame",
]

__version__ = "0.1.0"
