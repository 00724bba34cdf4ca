"""Published model configurations (layer/head/width rows and DAG coefficients)."""

from __future__ import annotations

from .config import DagCoefficients, DataConfig, ModelConfig, OptimizerConfig, RunConfig, TelemetryConfig

# name: (reported params in millions, layers, heads, d_model, flavor, max_lr, warmup, (l1, l2, l3))
TABLE = {
    "PLDRv5-1": (104, 7, 12, 768, "v5", 1e-3, 8000, (None, None, None)),
    "PLDRv5-2": (110, 5, 14, 896, "v5", 1e-3, 2000, (None, None, None)),
    # listed with d_model 1408, which is not 20 * 64; 1280 matches d_k = 64 and the 144M count
    "PLDRv5-3": (144, 3, 20, 1280, "v5", 1e-3, 2000, (None, None, None)),
    "PLDRv5-4": (260, 1, 42, 2688, "v5", 1e-3, 2000, (None, None, None)),
    "PLDRv9-1": (114, 4, 15, 960, "v9", 1e-3, 8000, (None, None, None)),
    "PLDRv9-2": (147, 3, 20, 1280, "v9", 1e-3, 2000, (None, None, None)),
    "PLDRv5-DAG-1": (110, 5, 14, 896, "v5", 1.2e-3, 2000, (0.05, 0.05, 0.05)),
    "PLDRv5-DAG-2": (110, 5, 14, 896, "v5", 1e-3, 2000, (0.02, 0.02, 0.02)),
    "PLDRv5-DAG-3": (110, 5, 14, 896, "v5", 1.2e-3, 2000, (0.01, 0.01, 0.01)),
    "PLDRv5-DAG-4": (110, 5, 14, 896, "v5", 1e-3, 2000, (0.005, 0.005, 0.005)),
    "PLDRv5-DAG-5": (110, 5, 14, 896, "v5", 1e-3, 2000, (1.0, 0.005, 0.005)),
    "PLDRv5-DAG-6": (110, 5, 14, 896, "v5", 1e-3, 2000, (0.005, None, None)),
    "PLDRv5-DAG-7": (110, 5, 14, 896, "v5", 1e-3, 2000, (0.001, 0.005, 0.005)),
    "PLDRv5-ab-1": (110, 5, 14, 896, "v5", 6e-4, 2000, (None, None, None)),
    "PLDRv5-tab-1": (110, 5, 14, 896, "v5", 1e-3, 2000, (None, None, None)),
    "PLDRv5-tab-2": (110, 5, 14, 896, "v5", 1e-3, 8000, (None, None, None)),
}

# 32000-entry vocabulary; the byte tokenizer ids (pad 256, end 257) fit inside it
VOCAB_SIZE = 32000


def reported_params(name: str) -> int:
    return TABLE[name][0] * 1_000_000


def preset(name: str, pad_id: int = 256, end_id: int = 257, tokenizer: str = "byte") -> RunConfig:
    """Full-scale RunConfig for a published row (batch 16 x 2 micro-batches, context 1024)."""
    _, layers, heads, d_model, flavor, lr, warmup, lams = TABLE[name]
    return RunConfig(
        model=ModelConfig(
            d_model=d_model,
            n_heads=heads,
            n_layers=layers,
            vocab_size=VOCAB_SIZE,
            context_length=1024,
            flavor=flavor,
            pad_id=pad_id,
            end_id=end_id,
        ),
        optimizer=OptimizerConfig(max_lr=lr, warmup_steps=warmup, total_steps=250_000, micro_batches=2),
        dag=DagCoefficients(*lams),
        data=DataConfig(tokenizer=tokenizer, batch_size=16),
        telemetry=TelemetryConfig(),
        model_id=name,
    )


def toy(train_path: str = "", dag: DagCoefficients = DagCoefficients(), seed: int = 0) -> RunConfig:
    """Desk-scale run: 2 layers, 2 heads of width 16, byte tokens, context 32, batch 4."""
    return RunConfig(
        model=ModelConfig(
            d_model=32, n_heads=2, n_layers=2, vocab_size=259, context_length=32, pad_id=256, end_id=257,
        ),
        optimizer=OptimizerConfig(max_lr=3e-3, warmup_steps=100, total_steps=2000, weight_decay=0.0),
        dag=dag,
        data=DataConfig(train_path=train_path, tokenizer="byte", batch_size=4, epochs=10_000),
        telemetry=TelemetryConfig(log_every=50, val_every=250, val_batches=16),
        seed=seed,
        model_id="toy",
    )
