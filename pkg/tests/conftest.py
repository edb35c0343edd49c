import numpy as np
import pytest

from bss_mpc import spm
from bss_mpc import surrogate as sg


@pytest.fixture(scope="session")
def cell():
    params, _ = spm.load_params(spm.default_params_path())
    return params


@pytest.fixture(scope="session")
def pack():
    _, pack_spec = spm.load_params(spm.default_params_path())
    return pack_spec


@pytest.fixture(scope="session")
def p1c_w(cell, pack):
    return pack.cell_p1c_w


@pytest.fixture(scope="session")
def ens_small(cell, pack):
    """Quick ensemble for optimizer/controller tests (accuracy not at stake)."""
    ds = sg.generate_training_data(cell, pack, n_cycles=8, seed=97, cycle_hours=24)
    return sg.fit_ensemble(ds, n_train=96, restarts=2, seed=13)


@pytest.fixture(scope="session")
def ens_full(cell, pack, tmp_path_factory, request):
    """Default-scale surrogate (the accuracy-band subject). Cached on disk so
    repeated test sessions skip the ~2 minute generate-plus-fit."""
    cache_dir = request.config.cache.mkdir("bss_mpc_surrogate")
    ens_file = cache_dir / "ensemble_seed42_n512_v2.json"
    ds_file = cache_dir / "dataset_seed42.csv"
    if ens_file.exists() and ds_file.exists():
        ds = sg.dataset_from_csv(ds_file)
        ens = sg.load_ensemble(ens_file)
        x_mean, x_scale = ens.norm.x_mean, ens.norm.x_scale
        train, test = sg.k_center_split((ds.X - x_mean) / x_scale, 512)
        ds.train_idx, ds.test_idx = train, test
        return ds, ens
    ds = sg.generate_training_data(cell, pack, n_cycles=50, seed=42)
    ens = sg.fit_ensemble(ds, n_train=512, restarts=8, seed=7)
    sg.dataset_to_csv(ds, ds_file)
    sg.save_ensemble(ens, ens_file)
    return ds, ens
