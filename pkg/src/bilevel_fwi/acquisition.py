"""Observed data containers and synthetic acquisition.

Synthetic data are simulated on a grid refined by ``refine`` in each direction
(bilinear prolongation of the model) so that inversion on the coarse grid does
not commit an inverse crime.  The fine-grid wavefields are kept, so readings and
their derivatives with respect to sensor coordinates can be produced for any
sensor configuration without new solves.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid_fem import Grid, prolong
from .helmholtz import COUNTER, Operators, factorize, hz_to_omega, point_source_rhs
from .restriction import SensorSet, build_stencil


@dataclass(frozen=True)
class DataSet:
    """Complex sensor readings indexed ``[source, frequency, sensor]``.

    ``slopes`` optionally holds ``d readings / d p_{j,l}`` with shape
    ``(N_s, N_w, N_r, 2)``; it is needed only for sensor-position gradients.
    ``amplitude`` is the strength of every point source, so simulations
    compared against these readings must use the same value.
    """

    sources: np.ndarray
    freqs_hz: np.ndarray
    sensors: SensorSet
    readings: np.ndarray
    slopes: np.ndarray = None
    amplitude: float = 1.0

    def __post_init__(self):
        src = np.atleast_2d(np.asarray(self.sources, dtype=float))
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "freqs_hz", np.atleast_1d(np.asarray(self.freqs_hz, dtype=float)))
        expected = (len(src), len(self.freqs_hz), len(self.sensors))
        if self.readings.shape != expected:
            raise ValueError(f"readings shape {self.readings.shape} != {expected}")

    @property
    def omegas(self) -> np.ndarray:
        return hz_to_omega(1.0) * self.freqs_hz

    def subset(self, freq_idx) -> DataSet:
        freq_idx = np.atleast_1d(freq_idx)
        return replace(
            self,
            freqs_hz=self.freqs_hz[freq_idx],
            readings=self.readings[:, freq_idx],
            slopes=None if self.slopes is None else self.slopes[:, freq_idx],
        )


class SyntheticRecording:
    """Fine-grid wavefields of one true model, for all sources and frequencies."""

    def __init__(self, grid: Grid, model, sources, freqs_hz, refine: int = 2, amplitude: float = 1.0,
                 counter=COUNTER):
        self.grid = grid
        self.model = np.asarray(model, dtype=float)
        self.sources = np.atleast_2d(np.asarray(sources, dtype=float))
        self.freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
        self.refine = int(refine)
        self.amplitude = float(amplitude)
        self.fine_grid = grid.refined(self.refine)
        fine_model = self.model if self.refine == 1 else prolong(grid, self.fine_grid, self.model)
        ops = Operators.build(self.fine_grid)
        rhs = self.amplitude * np.stack([point_source_rhs(self.fine_grid, s) for s in self.sources], axis=1)
        fields = []
        for f in self.freqs_hz:
            fact = factorize(ops, fine_model, hz_to_omega(f), counter=counter)
            fields.append(fact.solve_forward(rhs))
        self.fields = np.array(fields)  # (N_w, M_fine, N_s)

    def dataset(self, P: SensorSet, freqs_hz=None) -> DataSet:
        idx = self._freq_index(freqs_hz)
        st = build_stencil(self.fine_grid, P)
        u = self.fields[idx]
        # (N_w, N_r, N_s) -> (N_s, N_w, N_r)
        readings = np.einsum("rm,wms->swr", st.R.toarray(), u)
        slopes = np.stack(
            [np.einsum("rm,wms->swr", D.toarray(), u) for D in (st.Rx, st.Rz)], axis=-1
        )
        return DataSet(self.sources, self.freqs_hz[idx], P, readings, slopes, self.amplitude)

    def _freq_index(self, freqs_hz):
        if freqs_hz is None:
            return np.arange(len(self.freqs_hz))
        idx = []
        for f in np.atleast_1d(freqs_hz):
            hit = np.flatnonzero(np.isclose(self.freqs_hz, f))
            if not len(hit):
                raise KeyError(f"frequency {f} Hz was not recorded")
            idx.append(hit[0])
        return np.array(idx)


def generate_data(grid: Grid, m_prime, P: SensorSet, freqs_hz, sources, refine: int = 2,
                  amplitude: float = 1.0) -> DataSet:
    """Synthetic readings for model ``m_prime`` simulated on a ``refine``-times finer grid."""
    return SyntheticRecording(grid, m_prime, sources, freqs_hz, refine, amplitude).dataset(P)


def add_noise(data: DataSet, snr_db: float, seed=None) -> DataSet:
    """Complex white noise with per-(source, frequency) RMS ratio ``10^(-snr/20)``."""
    if np.isposinf(snr_db):
        return data
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite or +inf")
    rng = np.random.default_rng(seed)
    d = data.readings
    rms = np.sqrt(np.mean(np.abs(d) ** 2, axis=-1, keepdims=True))
    noise = (rng.standard_normal(d.shape) + 1j * rng.standard_normal(d.shape)) / np.sqrt(2.0)
    noisy = d + rms * 10.0 ** (-snr_db / 20.0) * noise
    return replace(data, readings=noisy, slopes=None)
