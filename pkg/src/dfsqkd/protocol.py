"""Protocol logic for the two-photon rotation-immune QKD scheme.

Alice encodes a basis bit x and a key bit y onto the singlet source by
switching three electro-optic modulators on photon 1; the four encoded
states span the subspace left pointwise invariant by collective
polarization rotations, so the channel angle never reaches the key. Bob
chooses a basis bit z with a fourth modulator and reads both photons
through polarizing beam splitters. A standard single-photon BB84
baseline over the same channel is included for comparison.

Conventions fixed here and relied on everywhere else:

* modulator traversal order on photon 1 is M3, then M2, then M1 (the
  only order that reproduces the published switching table);
* detectors D1/D2 are photon 1's transmit/reflect ports, D3/D4 the same
  for photon 2; outcome index o in 0..3 means (D1,D3), (D1,D4), (D2,D3),
  (D2,D4) in that order;
* a coincidence on (D1,D4) or (D2,D3) decodes to bit 0, the other two
  pairs to bit 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import optics, qstate
from .optics import eom_unitary, modulator, rotation_batch, rotation_unitary
from .qstate import KET_H, KET_MINUS, KET_PLUS, KET_V, PHI_PLUS, PSI_MINUS

PROTOCOLS = ("dfs2", "bb84")

# Security threshold for BB84-type protocols: no secret key above 11%.
QBER_SECURE_THRESHOLD = 0.11

# Switching table: (x, y) -> (M1, M2, M3). x chooses the basis, y the bit.
MODULATOR_PATTERNS = {
    (0, 0): (False, False, False),
    (0, 1): (True, True, False),
    (1, 0): (False, True, True),
    (1, 1): (True, False, True),
}

# The four encoded states, built independently of the modulator chain so
# the encoder has something to be checked against. x=0 is the
# {phi+, psi-} basis, x=1 its diagonal counterpart.
ENCODED_TARGETS = {
    (0, 0): PSI_MINUS.copy(),
    (0, 1): PHI_PLUS.copy(),
    (1, 0): qstate.normalize(PHI_PLUS - PSI_MINUS),
    (1, 1): qstate.normalize(PHI_PLUS + PSI_MINUS),
}

# Joint outcome index -> decoded bit: (D1,D4) and (D2,D3) are bit 0.
OUTCOME_BIT = np.array([1, 0, 0, 1], dtype=np.int8)

# BB84 baseline: ideal single-photon states keyed by (x, y), and the
# detector-port -> bit map per Bob basis (port 0 is D1).
BB84_STATES = {
    (0, 0): KET_V.copy(),
    (0, 1): KET_H.copy(),
    (1, 0): KET_MINUS.copy(),
    (1, 1): KET_PLUS.copy(),
}
BB84_PORT_BIT = np.array([[1, 0], [0, 1]], dtype=np.int8)


def _check_bit(name: str, value: int) -> int:
    if value not in (0, 1):
        raise ValueError(f"{name} must be 0 or 1, got {value}")
    return int(value)


def modulator_pattern(x: int, y: int) -> tuple[bool, bool, bool]:
    """(M1, M2, M3) on/off pattern for basis bit x and key bit y."""
    return MODULATOR_PATTERNS[(_check_bit("x", x), _check_bit("y", y))]


def alice_unitary(x: int, y: int) -> np.ndarray:
    """Net action of Alice's modulator chain on photon 1.

    The photon traverses M3 first, then M2, then M1, so the matrix
    product runs M1 . M2 . M3.
    """
    m1, m2, m3 = modulator_pattern(x, y)
    return (
        eom_unitary(modulator(1, m1))
        @ eom_unitary(modulator(2, m2))
        @ eom_unitary(modulator(3, m3))
    )


@dataclass(frozen=True)
class EncodedSymbol:
    x: int
    y: int
    modulators: tuple[bool, bool, bool]
    target: np.ndarray


def encoded_symbol(x: int, y: int) -> EncodedSymbol:
    return EncodedSymbol(
        x=_check_bit("x", x),
        y=_check_bit("y", y),
        modulators=modulator_pattern(x, y),
        target=ENCODED_TARGETS[(x, y)].copy(),
    )


def encode_state(x: int, y: int, source: np.ndarray) -> np.ndarray:
    """Run the source state (singlet, pure or mixed) through Alice's
    modulators. Matches the corresponding encoded target up to a global
    phase when the source is the pure singlet."""
    return qstate.apply_photon(alice_unitary(x, y), 1, source)


def bob_photon1_analyzer(z: int) -> np.ndarray:
    """Analyzer ket of photon 1's transmit port (detector D1).

    z=0 measures {H, V} directly; z=1 switches M4 on in front of the
    PBS, which makes D1 collect the anti-diagonal component.
    """
    if _check_bit("z", z) == 0:
        return KET_H.copy()
    u4 = eom_unitary(modulator(4, True))
    return u4.conj().T @ KET_H


def bob_analyzers(z: int) -> tuple[np.ndarray, np.ndarray]:
    """(photon-1, photon-2) analyzer kets for Bob's basis bit z.

    Photon 2 has no modulator and is always read in {H, V}.
    """
    return bob_photon1_analyzer(z), KET_H.copy()


def outcome_to_bit(det1: int, det2: int) -> int:
    """Decode a coincidence to a raw-key bit: (D1,D4) or (D2,D3) -> 0,
    (D1,D3) or (D2,D4) -> 1."""
    if det1 not in (1, 2) or det2 not in (3, 4):
        raise ValueError(f"invalid coincidence detectors {(det1, det2)}")
    return 0 if (det1, det2) in ((1, 4), (2, 3)) else 1


def decode_convention() -> dict[int, tuple[str, str]]:
    """Fixed detector roles: D1/D3 are the transmit (H) ports, D2/D4 the
    reflect (V) ports of the two PBS cubes."""
    return {
        1: ("photon1", "H"),
        2: ("photon1", "V"),
        3: ("photon2", "H"),
        4: ("photon2", "V"),
    }


# --------------------------------------------------------------------------
# Exact outcome probabilities. Scalar versions go through the full density
# pipeline in qstate; the *_batch versions vectorize the same algebra over
# per-slot channel angles for the session engine.
# --------------------------------------------------------------------------


def dfs2_outcome_probs(x: int, y: int, z: int, theta: float, visibility: float) -> np.ndarray:
    """Born probabilities of the four detector pairs for one encoded
    symbol after the collective-rotation channel."""
    rho = qstate.werner_mix(PSI_MINUS, visibility)
    rho = encode_state(x, y, rho)
    rho = qstate.apply_collective(rotation_unitary(theta), rho)
    return qstate.born_probs(rho, *bob_analyzers(z))


def _encoded_target_matrix() -> np.ndarray:
    """Targets as (2, 2, 2, 2) tensors indexed [x, y, photon1, photon2]."""
    out = np.empty((2, 2, 2, 2), dtype=complex)
    for (x, y), ket in ENCODED_TARGETS.items():
        out[x, y] = ket.reshape(2, 2)
    return out


def _analyzer_bra_stack() -> np.ndarray:
    """(2, 4, 4) outcome bras for Bob's two basis settings."""
    return np.stack([qstate.analyzer_bras(*bob_analyzers(z)) for z in (0, 1)])


def dfs2_probs_batch(
    x: np.ndarray, y: np.ndarray, z: np.ndarray, thetas: np.ndarray, visibility: float
) -> np.ndarray:
    """Per-slot outcome probabilities, shape (n, 4).

    Same algebra as :func:`dfs2_outcome_probs`, using the mixture's
    linearity: p = V |<out| (R x R) |target>|^2 + (1-V)/4.
    """
    targets = _encoded_target_matrix()[x, y]  # (n, 2, 2)
    rot = rotation_batch(thetas)  # (n, 2, 2) real
    # (R x R)|t> in matrix form is R t R^T
    evolved = np.einsum("nai,nik,nck->nac", rot, targets, rot).reshape(-1, 4)
    bras = _analyzer_bra_stack()[z]  # (n, 4, 4)
    amps = np.einsum("noj,nj->no", bras, evolved)
    return visibility * np.abs(amps) ** 2 + (1.0 - visibility) / 4.0


def bb84_prepare(x: int, y: int, visibility: float) -> np.ndarray:
    """Single-photon state for the BB84 baseline: the ideal state chosen
    by (x, y), mixed with white noise exactly as the heralded photon of
    the imperfect pair source would be."""
    _check_bit("x", x), _check_bit("y", y)
    if not 0.0 <= visibility <= 1.0:
        raise ValueError(f"visibility must be in [0, 1], got {visibility}")
    ket = BB84_STATES[(x, y)]
    return visibility * qstate.ket_density(ket) + (1.0 - visibility) * np.eye(2, dtype=complex) / 2.0


def bb84_port1_prob(x: int, y: int, z: int, theta: float, visibility: float) -> float:
    """Probability that Bob's photon lands in detector D1 (transmit port)."""
    rho = bb84_prepare(x, y, visibility)
    u = rotation_unitary(theta)
    rho = u @ rho @ u.conj().T
    a1 = bob_photon1_analyzer(z)
    return float(np.real(a1.conj() @ rho @ a1))


def bb84_port1_batch(
    x: np.ndarray, y: np.ndarray, z: np.ndarray, thetas: np.ndarray, visibility: float
) -> np.ndarray:
    """Vectorized D1 probability per slot."""
    states = np.stack([BB84_STATES[(0, 0)], BB84_STATES[(0, 1)], BB84_STATES[(1, 0)], BB84_STATES[(1, 1)]])
    kets = states[2 * np.asarray(x) + np.asarray(y)]  # (n, 2)
    rot = rotation_batch(thetas)
    rotated = np.einsum("nij,nj->ni", rot, kets)
    analyzers = np.stack([bob_photon1_analyzer(0), bob_photon1_analyzer(1)])[z]
    amps = np.einsum("ni,ni->n", analyzers.conj(), rotated)
    return visibility * np.abs(amps) ** 2 + (1.0 - visibility) / 2.0


def bb84_round(
    x: int, y: int, z: int, theta: float, visibility: float, rng: np.random.Generator
) -> tuple[bool, int]:
    """One baseline round: returns (bases matched, Bob's bit)."""
    p1 = bb84_port1_prob(x, y, z, theta, visibility)
    port = 0 if rng.random() < p1 else 1
    return x == z, int(BB84_PORT_BIT[z, port])


# --------------------------------------------------------------------------
# Sifting and error estimation
# --------------------------------------------------------------------------


def sift(alice_x: np.ndarray, bob_z: np.ndarray, coincidence_slots: np.ndarray) -> np.ndarray:
    """Keep exactly the coincidence slots where the bases agree.

    The three arrays must be aligned (one entry per coincidence).
    """
    alice_x = np.asarray(alice_x)
    bob_z = np.asarray(bob_z)
    slots = np.asarray(coincidence_slots)
    if not (len(alice_x) == len(bob_z) == len(slots)):
        raise ValueError(
            f"misaligned sift inputs: {len(alice_x)} bases, {len(bob_z)} bases, {len(slots)} slots"
        )
    return slots[alice_x == bob_z]


@dataclass(frozen=True)
class QberReport:
    """Error estimate from a disclosed sample. qber and stderr are None
    when nothing was compared."""

    n_compared: int
    n_errors: int
    qber: Optional[float]
    stderr: Optional[float]

    def to_dict(self) -> dict:
        # n_compared/n_errors stay ints for sampled sessions and floats in
        # the infinite-shot limit; pass them through untouched.
        return {
            "n_compared": self.n_compared,
            "n_errors": self.n_errors,
            "qber": None if self.qber is None else float(self.qber),
            "stderr": None if self.stderr is None else float(self.stderr),
        }


def qber_report(n_compared: int, n_errors: int) -> QberReport:
    if n_compared == 0:
        return QberReport(0, 0, None, None)
    q = n_errors / n_compared
    return QberReport(n_compared, n_errors, q, float(np.sqrt(q * (1.0 - q) / n_compared)))


def sample_positions(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Random key positions to disclose for the error test (sorted)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"sample_fraction must be in (0, 1], got {fraction}")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    m = min(n, max(1, int(round(fraction * n))))
    return np.sort(rng.permutation(n)[:m]).astype(np.int64)


def estimate_qber(
    alice_bits: np.ndarray,
    bob_bits: np.ndarray,
    sample_fraction: float,
    rng: np.random.Generator,
) -> tuple[QberReport, np.ndarray]:
    """Disclose a random sample of the sifted keys and count disagreements.

    Returns the report and the disclosed positions, which must be removed
    from the final key.
    """
    a = np.asarray(alice_bits)
    b = np.asarray(bob_bits)
    if len(a) != len(b):
        raise ValueError(f"sifted keys differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise ValueError("cannot estimate an error rate from empty keys")
    positions = sample_positions(len(a), sample_fraction, rng)
    n_errors = int(np.count_nonzero(a[positions] != b[positions]))
    return qber_report(len(positions), n_errors), positions


# --------------------------------------------------------------------------
# Key rate
# --------------------------------------------------------------------------


def binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return float(-p * np.log2(p) - (1.0 - p) * np.log2(1.0 - p))


@dataclass(frozen=True)
class KeyRateResult:
    qber_in: Optional[float]
    rate: float
    secure: bool

    def to_dict(self) -> dict:
        return {
            "qber_in": None if self.qber_in is None else float(self.qber_in),
            "rate": float(self.rate),
            "secure": bool(self.secure),
        }


def key_rate(qber: float) -> KeyRateResult:
    """Asymptotic secret fraction 1 - 2 H2(e), floored at zero, with the
    11% security threshold."""
    if not 0.0 <= qber <= 1.0:
        raise ValueError(f"qber must be in [0, 1], got {qber}")
    secure = qber < QBER_SECURE_THRESHOLD
    rate = max(0.0, 1.0 - 2.0 * binary_entropy(qber)) if secure else 0.0
    return KeyRateResult(qber_in=float(qber), rate=rate, secure=secure)


# --------------------------------------------------------------------------
# Analytic and Monte-Carlo error rates (independent routes used to check
# the simulator and each other)
# --------------------------------------------------------------------------


def _check_protocol(protocol: str) -> str:
    p = protocol.lower()
    if p not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    return p


def predicted_qber(protocol: str, theta: float, visibility: float) -> float:
    """Closed-form matched-basis error rate.

    The encoded protocol sees only the source noise, (1-V)/2, at any
    rotation angle; single-photon BB84 adds the rotation term V sin^2.
    """
    p = _check_protocol(protocol)
    base = (1.0 - visibility) / 2.0
    if p == "dfs2":
        return base
    return base + visibility * float(np.sin(theta)) ** 2


def exact_qber(protocol: str, theta: float, visibility: float) -> float:
    """Matched-basis error rate via the full density pipeline, pooled
    uniformly over the four symbols. Independent of
    :func:`predicted_qber`."""
    p = _check_protocol(protocol)
    total = 0.0
    for x in (0, 1):
        for y in (0, 1):
            if p == "dfs2":
                probs = dfs2_outcome_probs(x, y, x, theta, visibility)
                total += float(probs[OUTCOME_BIT != y].sum())
            else:
                p1 = bb84_port1_prob(x, y, x, theta, visibility)
                ports = np.array([p1, 1.0 - p1])
                total += float(ports[BB84_PORT_BIT[x] != y].sum())
    return total / 4.0


def mc_qber(
    protocol: str,
    theta: float,
    visibility: float,
    n_bits: int,
    rng: np.random.Generator,
    chunk: int = 1 << 21,
) -> float:
    """Monte-Carlo matched-basis error rate over n_bits sampled rounds.

    Outcome distributions come from the scalar density pipeline (an
    independent route from the closed form), then rounds are sampled in
    chunks to keep memory flat at large n_bits.
    """
    p = _check_protocol(protocol)
    if p == "dfs2":
        cum = np.stack(
            [np.cumsum(dfs2_outcome_probs(x, y, x, theta, visibility)) for x in (0, 1) for y in (0, 1)]
        )
    else:
        port1 = np.array(
            [bb84_port1_prob(x, y, x, theta, visibility) for x in (0, 1) for y in (0, 1)]
        )
    n_errors = 0
    remaining = int(n_bits)
    while remaining:
        n = min(remaining, chunk)
        x = rng.integers(0, 2, size=n)
        y = rng.integers(0, 2, size=n)
        u = rng.random(n)
        if p == "dfs2":
            rows = cum[2 * x + y]
            outcome = np.minimum((rows < u[:, None]).sum(axis=1), 3)
            bits = OUTCOME_BIT[outcome]
        else:
            port = (u >= port1[2 * x + y]).astype(np.int64)
            bits = BB84_PORT_BIT[x, port]
        n_errors += int(np.count_nonzero(bits != y))
        remaining -= n
    return n_errors / n_bits
