import pytest

from hwsi.synthgen import GenConfig, generate_corpus

SMALL = dict(classes=4, n_samples=24, regions_per_wsi=2, patches_per_region=6, cells_per_patch=4,
             d_cell_raw=8, d_patch_raw=8, d_text_raw=8, cell_vocab=12, patch_vocab=16, region_vocab=8,
             wsi_vocab=4, region_pool=2, patch_pool=3, patches_active=2, cell_pool=2)


def small_config(**overrides) -> GenConfig:
    values = dict(SMALL)
    values.update(overrides)
    return GenConfig(**values)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(small_config(seed=1))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
