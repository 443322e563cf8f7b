#!/usr/bin/env python3
"""Fidelity victim bridge: fine-tune a real classifier on toolkit-produced datasets.

Reads only the documented JSONL file schemas and writes prediction files in the
interchange schema, so attack metrics can be computed by the main toolkit:

  inputs
    --train          corpus JSONL          {"id", "text", "label"}
    --benign-test    corpus JSONL          {"id", "text", "label"}
    --poisoned-test  poisoned-test JSONL   {"id", "text", "label", "target"}
  outputs (in --out-dir)
    predictions_benign_test.jsonl          {"id", "predicted", "true"}
    predictions_poisoned_test.jsonl        {"id", "predicted", "true", "target"}
    (plus *_cft.jsonl variants when --cft-epochs > 0)

Two recipes:
  bert    fine-tune a pretrained encoder: 13 epochs, 6% linear warmup, lr 2e-5,
          batch 32, Adam (defaults; override per flag). Needs model weights
          (hub name or local directory).
  bilstm  2-layer bidirectional LSTM, 300-d embeddings, 1024 hidden units,
          50 epochs, lr 0.02, momentum SGD; vocabulary built from the train
          file, so it runs fully offline.

Exit codes: 0 ok, 2 input/schema error, 3 hardware unavailable, 1 training failure.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class SchemaError(Exception):
    pass


class HardwareError(Exception):
    pass


@dataclass
class BridgeConfig:
    arch: str
    model_name: str
    epochs: int
    warmup: float
    lr: float
    batch: int
    seed: int
    cft_epochs: int
    train_path: Path
    benign_test_path: Path
    poisoned_test_path: Path
    benign_train_path: Path | None  # CFT source; defaults to benign test-time corpus dir's train
    out_dir: Path
    device: str
    max_length: int = 128
    embed_dim: int = 300
    hidden_dim: int = 1024
    lstm_layers: int = 2
    momentum: float = 0.9

    def validate(self) -> None:
        if self.epochs < 1:
            raise SchemaError("epochs must be >= 1")
        for name in ("train_path", "benign_test_path", "poisoned_test_path"):
            path = getattr(self, name)
            if not path.exists():
                raise SchemaError(f"{name.replace('_', '-')} does not exist: {path}")
        if self.cft_epochs > 0 and (self.benign_train_path is None or not self.benign_train_path.exists()):
            raise SchemaError("--cft-epochs > 0 needs --benign-train pointing at the benign train JSONL")


def _read_jsonl(path: Path, required: set[str]) -> list[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = required - set(row)
            if missing:
                raise SchemaError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: no records")
    return rows


def _write_predictions(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def _resolve_device(requested: str) -> torch.device:
    if requested == "cuda" and not torch.cuda.is_available():
        raise HardwareError("cuda requested but no GPU is available")
    if requested == "auto":
        requested = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(requested)


# ---------------------------------------------------------------------------
# BiLSTM recipe (offline-capable)
# ---------------------------------------------------------------------------


class BiLstmClassifier(nn.Module):
    def __init__(self, vocab_size: int, n_classes: int, embed_dim: int, hidden_dim: int, layers: int):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=0)
        self.lstm = nn.LSTM(embed_dim, hidden_dim, num_layers=layers, bidirectional=True, batch_first=True)
        self.head = nn.Linear(2 * hidden_dim, n_classes)

    def forward(self, token_ids, lengths):
        embedded = self.embedding(token_ids)
        packed = nn.utils.rnn.pack_padded_sequence(embedded, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (hidden, _) = self.lstm(packed)
        final = torch.cat([hidden[-2], hidden[-1]], dim=1)  # last layer, both directions
        return self.head(final)


class BilstmRunner:
    def __init__(self, cfg: BridgeConfig, train_texts: list[str], labels: list[str], device: torch.device):
        self.cfg = cfg
        self.labels = labels
        self.device = device
        vocab: dict[str, int] = {"<pad>": 0, "<unk>": 1}
        for text in train_texts:
            for token in text.lower().split():
                vocab.setdefault(token, len(vocab))
        self.vocab = vocab
        self.model = BiLstmClassifier(len(vocab), len(labels), cfg.embed_dim, cfg.hidden_dim, cfg.lstm_layers).to(device)

    def _encode(self, texts: list[str]):
        ids = [
            [self.vocab.get(tok, 1) for tok in text.lower().split()[: self.cfg.max_length]] or [1]
            for text in texts
        ]
        lengths = torch.tensor([len(x) for x in ids])
        width = int(lengths.max())
        batch = torch.zeros((len(ids), width), dtype=torch.long)
        for i, seq in enumerate(ids):
            batch[i, : len(seq)] = torch.tensor(seq)
        return batch.to(self.device), lengths

    def fit(self, texts: list[str], label_ids: list[int], epochs: int, lr: float | None = None) -> None:
        optimizer = torch.optim.SGD(self.model.parameters(), lr=lr if lr is not None else self.cfg.lr, momentum=self.cfg.momentum)
        loss_fn = nn.CrossEntropyLoss()
        order = list(range(len(texts)))
        rng = random.Random(self.cfg.seed)
        self.model.train()
        for _ in range(epochs):
            rng.shuffle(order)
            for start in range(0, len(order), self.cfg.batch):
                chunk = order[start : start + self.cfg.batch]
                token_ids, lengths = self._encode([texts[i] for i in chunk])
                target = torch.tensor([label_ids[i] for i in chunk], device=self.device)
                optimizer.zero_grad()
                loss = loss_fn(self.model(token_ids, lengths), target)
                loss.backward()
                optimizer.step()

    @torch.no_grad()
    def predict(self, texts: list[str]) -> list[str]:
        self.model.eval()
        out: list[str] = []
        for start in range(0, len(texts), self.cfg.batch):
            token_ids, lengths = self._encode(texts[start : start + self.cfg.batch])
            logits = self.model(token_ids, lengths)
            out.extend(self.labels[i] for i in logits.argmax(dim=1).tolist())
        return out


# ---------------------------------------------------------------------------
# BERT recipe (pretrained encoder fine-tune)
# ---------------------------------------------------------------------------


class BertRunner:
    def __init__(self, cfg: BridgeConfig, labels: list[str], device: torch.device):
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        self.cfg = cfg
        self.labels = labels
        self.device = device
        self.tokenizer = AutoTokenizer.from_pretrained(cfg.model_name)
        self.model = AutoModelForSequenceClassification.from_pretrained(cfg.model_name, num_labels=len(labels)).to(device)

    def _encode(self, texts: list[str]):
        return self.tokenizer(
            texts, padding=True, truncation=True, max_length=self.cfg.max_length, return_tensors="pt"
        ).to(self.device)

    def fit(self, texts: list[str], label_ids: list[int], epochs: int, lr: float | None = None) -> None:
        from transformers import get_linear_schedule_with_warmup

        optimizer = torch.optim.Adam(self.model.parameters(), lr=lr if lr is not None else self.cfg.lr)
        steps_per_epoch = (len(texts) + self.cfg.batch - 1) // self.cfg.batch
        total = steps_per_epoch * epochs
        scheduler = get_linear_schedule_with_warmup(optimizer, int(self.cfg.warmup * total), total)
        loss_fn = nn.CrossEntropyLoss()
        order = list(range(len(texts)))
        rng = random.Random(self.cfg.seed)
        self.model.train()
        for _ in range(epochs):
            rng.shuffle(order)
            for start in range(0, len(order), self.cfg.batch):
                chunk = order[start : start + self.cfg.batch]
                encoded = self._encode([texts[i] for i in chunk])
                target = torch.tensor([label_ids[i] for i in chunk], device=self.device)
                optimizer.zero_grad()
                logits = self.model(**encoded).logits
                loss = loss_fn(logits, target)
                loss.backward()
                optimizer.step()
                scheduler.step()

    @torch.no_grad()
    def predict(self, texts: list[str]) -> list[str]:
        self.model.eval()
        out: list[str] = []
        for start in range(0, len(texts), self.cfg.batch):
            encoded = self._encode(texts[start : start + self.cfg.batch])
            logits = self.model(**encoded).logits
            out.extend(self.labels[i] for i in logits.argmax(dim=1).tolist())
        return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def bridge_train_and_predict(cfg: BridgeConfig) -> dict[str, Path]:
    cfg.validate()
    _seed_everything(cfg.seed)
    device = _resolve_device(cfg.device)

    train_rows = _read_jsonl(cfg.train_path, {"id", "text", "label"})
    benign_rows = _read_jsonl(cfg.benign_test_path, {"id", "text", "label"})
    poisoned_rows = _read_jsonl(cfg.poisoned_test_path, {"id", "text", "label", "target"})

    labels = sorted({row["label"] for row in train_rows})
    label_to_id = {label: i for i, label in enumerate(labels)}
    for rows, path in ((benign_rows, cfg.benign_test_path), (poisoned_rows, cfg.poisoned_test_path)):
        for row in rows:
            if row["label"] not in label_to_id:
                raise SchemaError(f"{path}: label {row['label']!r} not present in the training labels {labels}")

    texts = [row["text"] for row in train_rows]
    label_ids = [label_to_id[row["label"]] for row in train_rows]
    if cfg.arch == "bilstm":
        runner = BilstmRunner(cfg, texts, labels, device)
    elif cfg.arch == "bert":
        runner = BertRunner(cfg, labels, device)
    else:
        raise SchemaError(f"unknown arch {cfg.arch!r} (expected bert or bilstm)")

    runner.fit(texts, label_ids, cfg.epochs)

    written: dict[str, Path] = {}

    def export(tag: str) -> None:
        benign_preds = runner.predict([row["text"] for row in benign_rows])
        rows = [
            {"id": row["id"], "predicted": pred, "true": row["label"]}
            for row, pred in zip(benign_rows, benign_preds)
        ]
        path = cfg.out_dir / f"predictions_benign_test{tag}.jsonl"
        _write_predictions(rows, path)
        written[f"benign{tag}"] = path

        poisoned_preds = runner.predict([row["text"] for row in poisoned_rows])
        rows = [
            {"id": row["id"], "predicted": pred, "true": row["label"], "target": row["target"]}
            for row, pred in zip(poisoned_rows, poisoned_preds)
        ]
        path = cfg.out_dir / f"predictions_poisoned_test{tag}.jsonl"
        _write_predictions(rows, path)
        written[f"poisoned{tag}"] = path

    export("")

    if cfg.cft_epochs > 0:
        cft_rows = _read_jsonl(cfg.benign_train_path, {"id", "text", "label"})
        runner.fit([row["text"] for row in cft_rows], [label_to_id[row["label"]] for row in cft_rows], cfg.cft_epochs)
        export("_cft")

    return written


def parse_args(argv=None) -> BridgeConfig:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--train", required=True, type=Path, help="malignant (or benign) train JSONL")
    parser.add_argument("--benign-test", required=True, type=Path)
    parser.add_argument("--poisoned-test", required=True, type=Path)
    parser.add_argument("--benign-train", type=Path, help="benign train JSONL for continued fine-tuning")
    parser.add_argument("--out-dir", required=True, type=Path)
    parser.add_argument("--arch", choices=("bert", "bilstm"), default="bert")
    parser.add_argument("--model", default="bert-base-uncased", help="hub name or local directory (bert arch)")
    parser.add_argument("--epochs", type=int, default=None, help="default: 13 for bert, 50 for bilstm")
    parser.add_argument("--warmup", type=float, default=0.06)
    parser.add_argument("--lr", type=float, default=None, help="default: 2e-5 for bert, 0.02 for bilstm")
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--cft-epochs", type=int, default=0, help="benign epochs after poisoned training (paper: 3)")
    parser.add_argument("--device", default="auto", choices=("auto", "cpu", "cuda"))
    parser.add_argument("--max-length", type=int, default=128)
    args = parser.parse_args(argv)
    return BridgeConfig(
        arch=args.arch,
        model_name=args.model,
        epochs=args.epochs if args.epochs is not None else (13 if args.arch == "bert" else 50),
        warmup=args.warmup,
        lr=args.lr if args.lr is not None else (2e-5 if args.arch == "bert" else 0.02),
        batch=args.batch,
        seed=args.seed,
        cft_epochs=args.cft_epochs,
        train_path=args.train,
        benign_test_path=args.benign_test,
        poisoned_test_path=args.poisoned_test,
        benign_train_path=args.benign_train,
        out_dir=args.out_dir,
        device=args.device,
        max_length=args.max_length,
    )


def main(argv=None) -> int:
    try:
        written = bridge_train_and_predict(parse_args(argv))
    except SchemaError as exc:
        print(json.dumps({"error": "schema", "message": str(exc)}), file=sys.stderr)
        return 2
    except HardwareError as exc:
        print(json.dumps({"error": "hardware", "message": str(exc)}), file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": "training", "message": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    for tag, path in written.items():
        print(f"{tag}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
