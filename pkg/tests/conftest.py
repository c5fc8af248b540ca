import pytest
import torch

from xdec.config import Config, DataConfig, ModelConfig, TrainConfig
from xdec.data import Dataset, generate_corpus, write_dataset
from xdec.decoder import build_model
from xdec.vocab import Vocabulary

# one verdict line per acceptance criterion, echoed after the test table
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**train_overrides) -> Config:
    train = dict(
        seed=0,
        steps=4,
        seg_batch=3,
        itp_batch=3,
        ref_batch=3,
        itp_ratio=1.0,
        ref_ratio=1.0,
    )
    train.update(train_overrides)
    return Config(
        model=ModelConfig(
            dim=32,
            heads=4,
            depth=2,
            num_latent_queries=5,
            text_layers=1,
            strides=(1, 2, 4),
            max_text_len=16,
        ),
        data=DataConfig(
            canvas=32,
            min_objects=1,
            max_objects=2,
            radius_min=5,
            radius_max=8,
            train_count=6,
            eval_count=3,
        ),
        train=TrainConfig(**train),
    )


@pytest.fixture(scope="session")
def cfg() -> Config:
    return tiny_config()


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    from xdec.data import build_vocabulary

    return build_vocabulary()


@pytest.fixture(scope="session")
def model(cfg, vocab):
    m = build_model(cfg, len(vocab))
    m.eval()
    return m


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, cfg):
    root = tmp_path_factory.mktemp("corpus")
    samples, next_seed = generate_corpus(0, cfg.data.train_count, cfg.data)
    write_dataset(str(root / "train"), samples, 0, cfg.data)
    eval_samples, _ = generate_corpus(
        next_seed, cfg.data.eval_count, cfg.data,
        skip_captions={s.caption for s in samples},
    )
    write_dataset(str(root / "eval"), eval_samples, next_seed, cfg.data)
    return root


@pytest.fixture(scope="session")
def train_split(dataset_dir) -> Dataset:
    return Dataset(str(dataset_dir / "train"))


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(4)
