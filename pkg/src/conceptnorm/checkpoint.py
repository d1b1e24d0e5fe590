"""Model checkpoints: a zip archive with a JSON manifest, raw little-endian
tensor blobs, the vocabulary and the concept inventory.

Archives are written with fixed timestamps and sorted entries, so saving the
same model twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .corpus import ConceptInventory
from .encoder import Encoder, ToyEncoder, Vocabulary
from .errors import CorruptCheckpoint, InventoryMismatch
from .preprocess import PreprocessConfig, default_lexicon_paths
from .trainer import ConceptNormalizer, TrainConfig

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _preprocess_to_dict(cfg: PreprocessConfig) -> dict:
    defaults = {str(p) for p in default_lexicon_paths()}
    return {
        "strip_non_ascii": cfg.strip_non_ascii,
        "squash_repeats": cfg.squash_repeats,
        "expand_contractions": cfg.expand_contractions,
        "expand_acronyms": cfg.expand_acronyms,
        # shipped lexicons are recorded by name so checkpoints stay portable
        "lexicon_paths": [
            f"@default/{Path(p).name}" if p in defaults else p for p in cfg.lexicon_paths
        ],
    }


def _preprocess_from_dict(d: dict) -> PreprocessConfig:
    base = {Path(p).name: str(p) for p in default_lexicon_paths()}
    paths = tuple(
        base[p.split("/", 1)[1]] if p.startswith("@default/") else p for p in d["lexicon_paths"]
    )
    return PreprocessConfig(
        strip_non_ascii=d["strip_non_ascii"],
        squash_repeats=d["squash_repeats"],
        expand_contractions=d["expand_contractions"],
        expand_acronyms=d["expand_acronyms"],
        lexicon_paths=paths,
    )


def save_checkpoint(model: ConceptNormalizer, path: str | Path) -> Path:
    path = Path(path)
    tensors = {f"encoder.{k}": v for k, v in model.encoder.state().items()}
    tensors["concepts"] = model.concepts
    blobs, entries = {}, []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        code = _DTYPES[arr.dtype.name]
        data = arr.astype(code, copy=False).tobytes()
        blobs[name] = data
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "dim": model.encoder.dim,
        "n_concepts": len(model.inventory),
        "inventory_hash": model.inventory.fingerprint(),
        "encoder": model.encoder.spec(),
        "tensors": entries,
        "train_config": model.config.to_dict(),
        "preprocess": _preprocess_to_dict(model.preprocess_config),
    }
    inv_lines = "".join(
        cid + ("" if term is None else "\t" + term) + "\n"
        for cid, term in zip(model.inventory.ids, model.inventory.terms)
    )
    vocab = getattr(model.encoder, "vocab", None)

    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        _entry(zf, "inventory.tsv", inv_lines.encode("utf-8"))
        if isinstance(vocab, Vocabulary):
            _entry(zf, "vocab.tsv", "".join(t + "\n" for t in vocab.tokens).encode("utf-8"))
        for name in sorted(blobs):
            _entry(zf, f"tensors/{name}.bin", blobs[name])
    path.write_bytes(buf.getvalue())
    return path


def _read(zf: zipfile.ZipFile, name: str) -> bytes:
    try:
        return zf.read(name)
    except KeyError:
        raise CorruptCheckpoint(f"checkpoint is missing {name}") from None


def _build_encoder(spec: dict, zf: zipfile.ZipFile) -> Encoder:
    kind = spec.get("type")
    if kind == "toy":
        tokens = _read(zf, "vocab.tsv").decode("utf-8").split("\n")[:-1]
        return ToyEncoder(
            Vocabulary(tokens),
            dim=spec["dim"],
            seed=spec["seed"],
            dtype=np.dtype(spec["dtype"]),
            frozen=spec["frozen"],
        )
    if kind == "transformer":
        from .hf_encoder import TransformerEncoder

        return TransformerEncoder.from_spec(spec)
    raise CorruptCheckpoint(f"unknown encoder type {kind!r}; pass encoder= to load it")


def load_checkpoint(
    path: str | Path,
    inventory: ConceptInventory | None = None,
    encoder: Encoder | None = None,
) -> ConceptNormalizer:
    """Load a model saved by :func:`save_checkpoint`.

    If ``inventory`` is given it must have the same index order as the one the
    model was trained with. ``encoder`` supplies an already constructed
    encoder whose tensors are overwritten from the archive (needed for
    encoder types this package cannot rebuild on its own).
    """
    path = Path(path)
    try:
        zf = zipfile.ZipFile(io.BytesIO(path.read_bytes()))
    except FileNotFoundError:
        raise CorruptCheckpoint(f"no checkpoint at {path}") from None
    except (zipfile.BadZipFile, OSError) as exc:
        raise CorruptCheckpoint(f"{path}: not a readable checkpoint ({exc})") from None
    try:
        with zf:
            try:
                manifest = json.loads(_read(zf, "manifest.json"))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise CorruptCheckpoint(f"{path}: bad manifest ({exc})") from None
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CorruptCheckpoint(f"{path}: unsupported format {manifest.get('format_version')!r}")

            ids, terms = [], []
            for line in _read(zf, "inventory.tsv").decode("utf-8").split("\n")[:-1]:
                cid, _, term = line.partition("\t")
                ids.append(cid)
                terms.append(term if "\t" in line else None)
            stored = ConceptInventory(ids, terms)
            if stored.fingerprint() != manifest["inventory_hash"] or len(stored) != manifest["n_concepts"]:
                raise CorruptCheckpoint(f"{path}: inventory does not match its recorded hash")
            if inventory is not None and inventory.fingerprint() != stored.fingerprint():
                raise InventoryMismatch(
                    f"{path}: checkpoint was trained on a different concept inventory "
                    f"({len(stored)} concepts) than the one supplied ({len(inventory)})"
                )

            arrays = {}
            for entry in manifest["tensors"]:
                data = _read(zf, f"tensors/{entry['name']}.bin")
                if hashlib.sha256(data).hexdigest() != entry["sha256"]:
                    raise CorruptCheckpoint(f"{path}: tensor {entry['name']} fails its checksum")
                dtype = np.dtype(entry["dtype"])
                arr = np.frombuffer(data, dtype=dtype).reshape(entry["shape"])
                arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))

            if encoder is None:
                encoder = _build_encoder(manifest["encoder"], zf)
    except zipfile.BadZipFile as exc:
        raise CorruptCheckpoint(f"{path}: damaged archive ({exc})") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed checkpoint ({exc})") from None

    concepts = arrays.pop("concepts", None)
    if concepts is None:
        raise CorruptCheckpoint(f"{path}: no concept matrix")
    enc_arrays = {k.removeprefix("encoder."): v for k, v in arrays.items()}
    try:
        encoder.load_state(enc_arrays)
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: encoder tensors do not fit ({exc})") from None
    return ConceptNormalizer(
        encoder,
        concepts,
        stored if inventory is None else inventory,
        TrainConfig.from_dict(manifest["train_config"]),
        _preprocess_from_dict(manifest["preprocess"]),
    )
