import numpy as np
import pytest
import torch

from cognitivetwin.data import (
    MODALITY_SLICES, N_FEATURES, PatientRecord, SyntheticConfig, VisitObservation,
    generate_synthetic_cohort, stratified_split,
)

# a deliberately tiny network so estimator-level tests run in seconds
TINY = dict(d_model=8, n_heads=2, n_layers=1, ff_dim=16, latent_dim=3, rnn_hidden=8,
            rnn_layers=1, emission_dim=8, n_forecast_samples=50)


def make_visit(month, mmse=None, fill=1.0, observed=True, imaging=True):
    values = np.full(N_FEATURES, fill, dtype=float)
    mask = np.full(N_FEATURES, observed, dtype=bool)
    if mmse is not None:
        values[0] = mmse
        mask[0] = True
    if not imaging:
        mask[MODALITY_SLICES["imaging"]] = False
    return VisitObservation.from_vectors(month, values, mask)


def make_patient(pid="P1", months=(0, 12, 24), mmse=(30, 28, 26), sex="female", age=70.0,
                 dx="MCI", apoe=1, split=None):
    visits = tuple(make_visit(m, s) for m, s in zip(months, mmse))
    return PatientRecord(pid, visits, sex, age, dx, apoe, split)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_cohort():
    return stratified_split(generate_synthetic_cohort(SyntheticConfig(n_patients=60), 3), seed=3)


# acceptance results, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
