"""
WiFi fingerprints and the pairwise fingerprint similarity.

The similarity of two fingerprints is the product of a detection likelihood
H / (L_i + L_j - H) and a signal strength likelihood
(1/H) * prod_n exp(-(f_i,n - f_j,n)^2 / (2 sigma^2)) over the H common APs.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.core.errors import InvalidInputError, LogParseError
from app.models.slam_models import SimilarityParams

logger = logging.getLogger(__name__)

WifiRecord = Tuple[float, str, float]


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """RSS readings (dBm) keyed by access point id, observed at one time."""

    timestamp: float
    readings: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.readings)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.timestamp == other.timestamp and self.readings == other.readings

    def ap_ids(self) -> List[str]:
        return sorted(self.readings)


def similarity(fi: Fingerprint, fj: Fingerprint, params: SimilarityParams = None) -> float:
    """
    Similarity of two fingerprints in [0, 1].

    Args:
        fi: first fingerprint
        fj: second fingerprint
        params: sigma^2 and the 1/H vs geometric-mean switch

    Returns:
        0 when no AP is shared, otherwise detection * signal likelihood
    """
    params = params or SimilarityParams()
    if len(fi) == 0 or len(fj) == 0:
        raise InvalidInputError("similarity requires non-empty fingerprints")

    common = sorted(fi.readings.keys() & fj.readings.keys())
    h = len(common)
    if h == 0:
        return 0.0

    squared = sum((fi.readings[ap] - fj.readings[ap]) ** 2 for ap in common)
    detection = h / (len(fi) + len(fj) - h)
    exponent = -squared / (2.0 * params.sigma_squared)
    if params.geometric_mean:
        return detection * math.exp(exponent / h)
    return detection * (math.exp(exponent) / h)


def similarity_matrix(fingerprints: Sequence[Fingerprint], params: SimilarityParams = None) -> np.ndarray:
    """
    All-pairs similarity over a dense AP vocabulary.

    Row i and column i are computed from identical element-wise terms, so the
    result is exactly symmetric.
    """
    params = params or SimilarityParams()
    n = len(fingerprints)
    if any(len(f) == 0 for f in fingerprints):
        raise InvalidInputError("similarity_matrix requires non-empty fingerprints")
    vocabulary = sorted({ap for f in fingerprints for ap in f.readings})
    column = {ap: c for c, ap in enumerate(vocabulary)}

    rss = np.zeros((n, len(vocabulary)))
    seen = np.zeros((n, len(vocabulary)), dtype=bool)
    for row, fp in enumerate(fingerprints):
        for ap, value in fp.readings.items():
            rss[row, column[ap]] = value
            seen[row, column[ap]] = True

    counts = seen.sum(axis=1).astype(float)
    result = np.zeros((n, n))
    for i in range(n):
        shared = seen[i] & seen
        h = shared.sum(axis=1).astype(float)
        diff = np.where(shared, rss[i] - rss, 0.0)
        squared = (diff * diff).sum(axis=1)
        exponent = -squared / (2.0 * params.sigma_squared)
        with np.errstate(divide="ignore", invalid="ignore"):
            detection = h / (counts[i] + counts - h)
            if params.geometric_mean:
                signal = np.exp(exponent / h)
            else:
                signal = np.exp(exponent) / h
        result[i] = np.where(h > 0, detection * signal, 0.0)
    return result


def group_bursts(records: Iterable[WifiRecord], burst_window: float = 2.0) -> List[Fingerprint]:
    """
    Group time-ordered (timestamp, ap_id, rss) records into fingerprints.

    A burst starts at its first record and takes every record strictly within
    `burst_window` seconds of it. Repeated APs keep the latest reading.
    """
    fingerprints: List[Fingerprint] = []
    start = None
    readings: Dict[str, float] = {}
    for timestamp, ap_id, rss in sorted(records, key=lambda r: r[0]):
        if start is None or timestamp - start >= burst_window:
            if readings:
                fingerprints.append(Fingerprint(start, readings))
            start, readings = timestamp, {}
        readings[ap_id] = rss
    if readings:
        fingerprints.append(Fingerprint(start, readings))
    return fingerprints


def load_wifi_log(path: str, burst_window: float = 2.0) -> List[Fingerprint]:
    """Read a `timestamp_s, ap_id, rss_dbm` CSV log into fingerprints."""
    records: List[WifiRecord] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            for line_no, row in enumerate(csv.reader(handle), start=1):
                if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                    continue
                if len(row) != 3:
                    raise LogParseError(path, line_no, f"expected 3 fields, got {len(row)}")
                try:
                    records.append((float(row[0]), row[1].strip(), float(row[2])))
                except ValueError as exc:
                    raise LogParseError(path, line_no, str(exc)) from exc
    except OSError as exc:
        raise LogParseError(path, None, f"cannot read WiFi log: {exc}") from exc

    fingerprints = group_bursts(records, burst_window)
    logger.info(f"Loaded {len(records)} WiFi records as {len(fingerprints)} fingerprints from {path}")
    return fingerprints


def write_wifi_log(path: str, fingerprints: Iterable[Fingerprint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write("# timestamp_s, ap_id, rss_dbm\n")
        for fp in fingerprints:
            for ap in fp.ap_ids():
                handle.write(f"{fp.timestamp:.3f},{ap},{fp.readings[ap]:.2f}\n")
