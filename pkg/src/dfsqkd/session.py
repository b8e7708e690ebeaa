"""Time-slotted end-to-end simulation and the two-party sifting protocol.

One session walks a 100 kHz clock: each slot may carry photon pairs
(Poisson), Alice encodes on pair slots, the channel angle is sampled per
slot, Bob measures, and the detector layer decides coincidences. The
classical conversation (detection declaration, basis sifting, error
test, summary) then runs over a Transport pair, so the same code drives
both the in-process mode and the two-process networked mode.

All randomness comes from four seeded streams. The engine consumes them
in a fixed, documented order, which is what makes identical configs give
bit-identical sessions:

* source: Poisson pair counts for every slot, then one outcome uniform
  per pair slot, then the detector draws (2 efficiency + 4 dark uniforms
  per pair slot);
* alice: x bits, then y bits (one batch each over pair slots), then the
  error-test sample positions;
* bob: z bits over pair slots;
* channel: per the channel model's own contract.

Networked mode simulates the quantum side on Alice's process and streams
Bob's measurement records to him as DETECTIONS precursor messages
(payload extended with a "bits" array and a "final" flag); everything
after that is identical in both modes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import protocol, transport as tp
from .optics import (
    DetectionEvent,
    DetectorParams,
    StaticChannel,
    channel_from_dict,
    detect_batch,
)
from .protocol import (
    BB84_PORT_BIT,
    OUTCOME_BIT,
    KeyRateResult,
    QberReport,
    key_rate,
    qber_report,
    sample_positions,
)
from .transport import Message, Transport, expect, memory_pair, pack_bits, unpack_bits

PRECURSOR_CHUNK = 100_000


class ConfigError(ValueError):
    """Invalid session configuration."""


class HandshakeMismatch(RuntimeError):
    """The two endpoints disagree on the session configuration."""


@dataclass(frozen=True)
class Seeds:
    alice: int = 1
    bob: int = 2
    channel: int = 3
    source: int = 4

    def to_dict(self) -> dict:
        return {
            "alice": int(self.alice),
            "bob": int(self.bob),
            "channel": int(self.channel),
            "source": int(self.source),
        }


@dataclass(frozen=True)
class SessionConfig:
    protocol: str = "dfs2"
    clock_hz: float = 1e5
    pair_rate_hz: float = 4000.0
    duration_s: float = 50.0
    visibility: float = 0.88
    channel: object = field(default_factory=lambda: StaticChannel(0.0))
    detectors: DetectorParams = field(default_factory=DetectorParams)
    sample_fraction: float = 0.1
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        if self.protocol not in protocol.PROTOCOLS:
            raise ConfigError(f"protocol must be one of {protocol.PROTOCOLS}, got {self.protocol!r}")
        if self.clock_hz <= 0:
            raise ConfigError(f"clock_hz must be positive, got {self.clock_hz}")
        if self.pair_rate_hz < 0:
            raise ConfigError(f"pair_rate_hz must be >= 0, got {self.pair_rate_hz}")
        if self.duration_s <= 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        if not 0.0 <= self.visibility <= 1.0:
            raise ConfigError(f"visibility must be in [0, 1], got {self.visibility}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.pair_rate_hz / self.clock_hz >= 1.0:
            raise ConfigError(
                f"mean pairs per slot must stay below 1, got {self.pair_rate_hz / self.clock_hz}"
            )

    @property
    def mean_pairs_per_slot(self) -> float:
        return self.pair_rate_hz / self.clock_hz

    @property
    def n_slots(self) -> int:
        return int(math.floor(self.clock_hz * self.duration_s))

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "clock_hz": float(self.clock_hz),
            "pair_rate_hz": float(self.pair_rate_hz),
            "duration_s": float(self.duration_s),
            "visibility": float(self.visibility),
            "channel": self.channel.to_dict(),
            "detectors": self.detectors.to_dict(),
            "sample_fraction": float(self.sample_fraction),
            "seeds": self.seeds.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        known = {
            "protocol",
            "clock_hz",
            "pair_rate_hz",
            "duration_s",
            "visibility",
            "channel",
            "detectors",
            "sample_fraction",
            "seeds",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "channel" in kwargs:
            kwargs["channel"] = channel_from_dict(kwargs["channel"])
        if "detectors" in kwargs:
            kwargs["detectors"] = DetectorParams.from_dict(kwargs["detectors"])
        if "seeds" in kwargs:
            kwargs["seeds"] = Seeds(**kwargs["seeds"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class SlotRecord:
    slot_index: int
    n_pairs: int
    alice_x: int
    alice_y: int
    bob_z: int
    theta: float
    event: Optional[DetectionEvent]


@dataclass(frozen=True)
class SessionSummary:
    n_slots: int
    n_coincidences: int
    n_sifted: int
    raw_rate_hz: float
    sifted_rate_hz: float
    qber: QberReport
    key_rate: KeyRateResult
    multi_pair_fraction: float
    final_key_bits: int

    def to_dict(self) -> dict:
        return {
            "n_slots": self.n_slots,
            "n_coincidences": self.n_coincidences,
            "n_sifted": self.n_sifted,
            "raw_rate_hz": self.raw_rate_hz,
            "sifted_rate_hz": self.sifted_rate_hz,
            "qber": self.qber.to_dict(),
            "key_rate": self.key_rate.to_dict(),
            "multi_pair_fraction": self.multi_pair_fraction,
            "final_key_bits": self.final_key_bits,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSummary":
        return cls(
            n_slots=d["n_slots"],
            n_coincidences=d["n_coincidences"],
            n_sifted=d["n_sifted"],
            raw_rate_hz=d["raw_rate_hz"],
            sifted_rate_hz=d["sifted_rate_hz"],
            qber=QberReport(**d["qber"]),
            key_rate=KeyRateResult(**d["key_rate"]),
            multi_pair_fraction=d["multi_pair_fraction"],
            final_key_bits=d["final_key_bits"],
        )


def poisson_pairs(mu: float, rng: np.random.Generator) -> int:
    """Pair count for one encoding period."""
    if not 0.0 <= mu < 1.0:
        raise ValueError(f"mean pairs per slot must be in [0, 1), got {mu}")
    return int(rng.poisson(mu))


# --------------------------------------------------------------------------
# Quantum-side engine
# --------------------------------------------------------------------------


@dataclass
class SimulationResult:
    """Arrays over pair slots (slots with at least one generated pair).

    Detector arrays are meaningful where coinc is true. alice_rng is the
    live stream to continue drawing from for the error test.
    """

    n_slots: int
    pair_slots: np.ndarray
    n_pairs: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    coinc: np.ndarray
    det1: np.ndarray
    det2: np.ndarray
    bob_bits: np.ndarray
    multi_pair: np.ndarray
    alice_rng: np.random.Generator

    def coincidence_view(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(slots, z, bits, multi_pair) restricted to coincidences."""
        m = self.coinc
        return self.pair_slots[m], self.z[m], self.bob_bits[m], self.multi_pair[m]

    def slot_records(self) -> list[SlotRecord]:
        """Materialized per-pair-slot records (debug/inspection scale)."""
        out = []
        for i, slot in enumerate(self.pair_slots):
            event = None
            if self.coinc[i]:
                event = DetectionEvent(
                    slot_index=int(slot),
                    detector_photon1=int(self.det1[i]),
                    detector_photon2=int(self.det2[i]),
                    is_coincidence=True,
                    multi_pair=bool(self.multi_pair[i]),
                )
            out.append(
                SlotRecord(
                    slot_index=int(slot),
                    n_pairs=int(self.n_pairs[i]),
                    alice_x=int(self.x[i]),
                    alice_y=int(self.y[i]),
                    bob_z=int(self.z[i]),
                    theta=float(self.theta[i]),
                    event=event,
                )
            )
        return out


def simulate_quantum(cfg: SessionConfig) -> SimulationResult:
    """Run the quantum side of a session (see module docstring for the
    exact stream-consumption order)."""
    rng_alice = np.random.default_rng(cfg.seeds.alice)
    rng_bob = np.random.default_rng(cfg.seeds.bob)
    rng_channel = np.random.default_rng(cfg.seeds.channel)
    rng_source = np.random.default_rng(cfg.seeds.source)

    n_slots = cfg.n_slots
    pair_counts = rng_source.poisson(cfg.mean_pairs_per_slot, n_slots)
    pair_slots = np.flatnonzero(pair_counts).astype(np.int64)
    k = len(pair_slots)

    x = rng_alice.integers(0, 2, size=k)
    y = rng_alice.integers(0, 2, size=k)
    z = rng_bob.integers(0, 2, size=k)
    theta = cfg.channel.sampler().sample_batch(pair_slots, rng_channel)

    u = rng_source.random(k)
    if cfg.protocol == "dfs2":
        probs = protocol.dfs2_probs_batch(x, y, z, theta, cfg.visibility)
        cum = np.cumsum(probs, axis=1)
        outcome = np.minimum((cum < u[:, None]).sum(axis=1), 3)
    else:
        # Photon 2 is the heralding trigger on D3; photon 1's port decides.
        p1 = protocol.bb84_port1_batch(x, y, z, theta, cfg.visibility)
        outcome = 2 * (u >= p1).astype(np.int64)

    coinc, det1, det2 = detect_batch(outcome, cfg.detectors, rng_source)

    if cfg.protocol == "dfs2":
        bob_bits = OUTCOME_BIT[((det1 - 1) << 1) | (det2 - 3)]
    else:
        bob_bits = BB84_PORT_BIT[z, det1 - 1]

    return SimulationResult(
        n_slots=n_slots,
        pair_slots=pair_slots,
        n_pairs=pair_counts[pair_slots],
        x=x,
        y=y,
        z=z,
        theta=theta,
        coinc=coinc,
        det1=det1,
        det2=det2,
        bob_bits=bob_bits,
        multi_pair=pair_counts[pair_slots] >= 2,
        alice_rng=rng_alice,
    )


def finalize(
    cfg: SessionConfig,
    n_slots,
    n_coincidences,
    n_sifted,
    report: QberReport,
    multi_pair_fraction: float,
) -> SessionSummary:
    """Assemble the summary from the bookkeeping counts."""
    if report.qber is None:
        kr = KeyRateResult(qber_in=None, rate=0.0, secure=False)
    else:
        kr = key_rate(report.qber)
    if kr.secure:
        final_bits = (n_sifted - report.n_compared) * kr.rate
        final_bits = int(final_bits) if isinstance(n_sifted, int) else final_bits
    else:
        final_bits = 0 if isinstance(n_sifted, int) else 0.0
    return SessionSummary(
        n_slots=n_slots,
        n_coincidences=n_coincidences,
        n_sifted=n_sifted,
        raw_rate_hz=n_coincidences / cfg.duration_s,
        sifted_rate_hz=n_sifted / cfg.duration_s,
        qber=report,
        key_rate=kr,
        multi_pair_fraction=multi_pair_fraction,
        final_key_bits=final_bits,
    )


# --------------------------------------------------------------------------
# The two-party conversation
# --------------------------------------------------------------------------


@dataclass
class EndpointResult:
    summary: SessionSummary
    sifted_key: np.ndarray
    kept_slots: np.ndarray
    disclosed_positions: np.ndarray


def _hello_exchange(cfg: SessionConfig, link: Transport) -> None:
    link.send(Message("HELLO", {"config": cfg.to_dict()}))
    theirs = expect(link, "HELLO").payload.get("config")
    if theirs != cfg.to_dict():
        raise HandshakeMismatch("peer configuration differs from ours")


def _send_detection_stream(link: Transport, slots, z, bits) -> None:
    n = len(slots)
    sent = 0
    while True:
        end = min(sent + PRECURSOR_CHUNK, n)
        chunk = slice(sent, end)
        link.send(
            Message(
                "DETECTIONS",
                {
                    "slots": [int(s) for s in slots[chunk]],
                    "bases": pack_bits(z[chunk]),
                    "bits": pack_bits(bits[chunk]),
                    "final": end == n,
                },
            )
        )
        sent = end
        if sent == n:
            break


def _recv_detection_stream(link: Transport) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    slots: list[int] = []
    z_parts: list[np.ndarray] = []
    bit_parts: list[np.ndarray] = []
    while True:
        msg = expect(link, "DETECTIONS")
        tp.validate_detections_payload(msg.payload)
        chunk_slots = msg.payload["slots"]
        slots.extend(chunk_slots)
        z_parts.append(unpack_bits(msg.payload["bases"], len(chunk_slots)))
        bit_parts.append(unpack_bits(msg.payload["bits"], len(chunk_slots)))
        if msg.payload.get("final"):
            break
    z = np.concatenate(z_parts) if z_parts else np.empty(0, dtype=np.uint8)
    bits = np.concatenate(bit_parts) if bit_parts else np.empty(0, dtype=np.uint8)
    return np.asarray(slots, dtype=np.int64), z, bits


def alice_sift_exchange(
    link: Transport, pair_slots: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Alice's half of sifting: receive Bob's declaration (slots and
    bases), reply with the slots whose bases match hers, and build her
    sifted key. Returns (alice key, kept slots)."""
    decl = expect(link, "DETECTIONS")
    tp.validate_detections_payload(decl.payload)
    decl_slots = np.asarray(decl.payload["slots"], dtype=np.int64)
    decl_z = unpack_bits(decl.payload["bases"], len(decl_slots))

    idx = np.searchsorted(pair_slots, decl_slots)
    if np.any(idx >= len(pair_slots)) or np.any(pair_slots[idx] != decl_slots):
        raise tp.ProtocolError("peer declared a detection in a slot without pairs")
    keep_mask = x[idx] == decl_z
    kept_slots = decl_slots[keep_mask]
    link.send(Message("SIFT_KEEP", {"keep": [int(s) for s in kept_slots]}))
    return y[idx][keep_mask].astype(np.uint8), kept_slots


def bob_sift_exchange(
    link: Transport, slots: np.ndarray, z: np.ndarray, bits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bob's half of sifting: declare every coincidence with its basis,
    then keep the slots Alice confirms. Returns (bob key, kept slots)."""
    link.send(Message("DETECTIONS", {"slots": [int(s) for s in slots], "bases": pack_bits(z)}))
    keep = expect(link, "SIFT_KEEP")
    kept_slots = np.asarray(keep.payload["keep"], dtype=np.int64)
    pos_in_decl = np.searchsorted(slots, kept_slots)
    if np.any(pos_in_decl >= len(slots)) or np.any(slots[pos_in_decl] != kept_slots):
        raise tp.ProtocolError("peer kept a slot we never declared")
    return bits[pos_in_decl].astype(np.uint8), kept_slots


def run_alice_endpoint(cfg: SessionConfig, link: Transport) -> EndpointResult:
    """Alice's whole session: simulate the quantum side, stream Bob's
    records to him, then run sifting and the error test."""
    _hello_exchange(cfg, link)

    sim = simulate_quantum(cfg)
    c_slots, c_z, c_bits, c_multi = sim.coincidence_view()
    _send_detection_stream(link, c_slots, c_z, c_bits)

    alice_key, kept_slots = alice_sift_exchange(link, sim.pair_slots, sim.x, sim.y)
    n_sifted = len(alice_key)
    n_coinc = len(c_slots)

    positions = (
        sample_positions(n_sifted, cfg.sample_fraction, sim.alice_rng)
        if n_sifted
        else np.empty(0, dtype=np.int64)
    )
    link.send(Message("SAMPLE_REQUEST", {"positions": [int(p) for p in positions]}))
    sample = expect(link, "SAMPLE_BITS")
    bob_sample = unpack_bits(sample.payload["bits"], len(positions))
    n_errors = int(np.count_nonzero(alice_key[positions] != bob_sample))
    report = qber_report(len(positions), n_errors)

    multi_fraction = float(c_multi.sum() / n_coinc) if n_coinc else 0.0
    summary = finalize(cfg, sim.n_slots, n_coinc, n_sifted, report, multi_fraction)
    link.send(Message("SUMMARY", summary.to_dict()))
    expect(link, "BYE")
    return EndpointResult(summary, alice_key, kept_slots, positions)


def run_bob_endpoint(cfg: SessionConfig, link: Transport) -> EndpointResult:
    """Bob's whole session: receive measurement records, declare them,
    sift, answer the error test, and verify the summary."""
    _hello_exchange(cfg, link)

    slots, z, bits = _recv_detection_stream(link)
    bob_key, kept_slots = bob_sift_exchange(link, slots, z, bits)

    req = expect(link, "SAMPLE_REQUEST")
    positions = np.asarray(req.payload["positions"], dtype=np.int64)
    if len(positions) and (positions.min() < 0 or positions.max() >= len(bob_key)):
        raise tp.ProtocolError("error-test positions out of range")
    link.send(Message("SAMPLE_BITS", {"bits": pack_bits(bob_key[positions])}))

    summary_msg = expect(link, "SUMMARY")
    summary = SessionSummary.from_dict(summary_msg.payload)
    _verify_summary(cfg, summary, n_coincidences=len(slots), n_sifted=len(bob_key))
    link.send(Message("BYE", {}))
    return EndpointResult(summary, bob_key, kept_slots, positions)


def _verify_summary(cfg: SessionConfig, summary: SessionSummary, n_coincidences: int, n_sifted: int) -> None:
    """Cross-check every field Bob can derive locally against the peer's
    summary; the error statistics themselves are Alice's to report."""
    expected = finalize(
        cfg,
        cfg.n_slots,
        n_coincidences,
        n_sifted,
        summary.qber,
        summary.multi_pair_fraction,
    )
    if expected.to_dict() != summary.to_dict():
        raise tp.ProtocolError("peer summary disagrees with local bookkeeping")


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------


def run_session_detailed(
    cfg: SessionConfig, link: Optional[tuple[Transport, Transport]] = None
) -> tuple[EndpointResult, EndpointResult]:
    """Run both endpoints over a transport pair (in-process by default)."""
    if link is None:
        link = memory_pair()
    alice_link, bob_link = link

    bob_result: list[EndpointResult] = []
    bob_error: list[BaseException] = []

    def bob_main():
        try:
            bob_result.append(run_bob_endpoint(cfg, bob_link))
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            bob_error.append(exc)
            bob_link.close()  # unblock Alice instead of deadlocking her recv

    thread = threading.Thread(target=bob_main, name="bob-endpoint")
    thread.start()
    alice = None
    alice_error: Optional[BaseException] = None
    try:
        alice = run_alice_endpoint(cfg, alice_link)
    except BaseException as exc:  # noqa: BLE001 - re-raised below
        alice_error = exc
    finally:
        alice_link.close()
        thread.join()
        bob_link.close()
    # Bob's failure is usually the root cause (Alice then just sees the
    # channel drop), so report it first.
    if bob_error:
        raise bob_error[0]
    if alice_error is not None:
        raise alice_error
    bob = bob_result[0]
    if alice.summary.to_dict() != bob.summary.to_dict():
        raise RuntimeError("session summaries disagree between endpoints")
    return alice, bob


def run_session(cfg: SessionConfig, link: Optional[tuple[Transport, Transport]] = None) -> SessionSummary:
    alice, _bob = run_session_detailed(cfg, link)
    return alice.summary


# --------------------------------------------------------------------------
# Infinite-shot limit
# --------------------------------------------------------------------------


def exact_session_summary(cfg: SessionConfig) -> SessionSummary:
    """Expected-value summary with sampling replaced by Born-rule
    arithmetic. Counts become expected values (floats).

    Only defined for a static channel and dark-count-free detectors.
    """
    if not isinstance(cfg.channel, StaticChannel):
        raise ConfigError("exact mode requires a static channel")
    if cfg.detectors.dark_count_prob != 0.0:
        raise ConfigError("exact mode requires dark_count_prob = 0")

    mu = cfg.mean_pairs_per_slot
    n_slots = cfg.n_slots
    p_pair = 1.0 - math.exp(-mu)
    p_coinc = p_pair * cfg.detectors.efficiency**2
    n_coinc = n_slots * p_coinc
    n_sifted = n_coinc / 2.0

    if n_coinc == 0.0:
        report = QberReport(0, 0, None, None)
        return finalize(cfg, n_slots, 0.0, 0.0, report, 0.0)

    qber = protocol.exact_qber(cfg.protocol, cfg.channel.theta, cfg.visibility)
    n_compared = cfg.sample_fraction * n_sifted
    report = QberReport(
        n_compared=n_compared, n_errors=qber * n_compared, qber=qber, stderr=0.0
    )
    multi_fraction = (1.0 - math.exp(-mu) * (1.0 + mu)) / p_pair
    return finalize(cfg, n_slots, n_coinc, n_sifted, report, multi_fraction)
