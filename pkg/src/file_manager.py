"""
Module de gestion des fichiers de données pour WeakGround
=========================================================

Ce module lit et écrit le fichier de données ligne par ligne (une scène par
ligne) ainsi que son fichier compagnon `<dataset>.meta.json`.

Tout ce que l'entraînement ne doit jamais voir (identifiants des objets
cibles, correspondances proposition/objet, propositions de vérité terrain) se
trouve sous la clé "eval" de chaque enregistrement, à côté de la liste des
objets. Le mode de chargement faible ignore les deux avant de construire une
Scene.
"""

import json
import logging
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import DatasetError
from src.geometry import Box3
from src.queryparse import TemplateMeta
from src.synthworld import CategoryVocab, GenConfig, Proposal, QueryRecord, Scene, SceneObject

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOADER_MODES = ("weak", "full")

PathLike = Union[str, Path]


def _dumps(record: dict) -> str:
    return json.dumps(record, separators=(",", ":"), sort_keys=False)


def _proposal_to_record(proposal: Proposal) -> dict:
    return {
        "box": proposal.box.to_dict(),
        "confidence": float(proposal.confidence),
        "det_likelihood": [float(v) for v in proposal.det_likelihood],
        "appearance": [float(v) for v in proposal.appearance],
    }


def _proposal_from_record(data: dict, matched: Optional[int] = None) -> Proposal:
    return Proposal(
        Box3.from_dict(data["box"]),
        float(data["confidence"]),
        np.asarray(data["det_likelihood"], dtype=np.float64),
        np.asarray(data["appearance"], dtype=np.float64),
        matched,
    )


def scene_to_record(scene: Scene, vocab: CategoryVocab) -> dict:
    """Une ligne du jeu de données ; la section eval garde toute la vérité terrain"""
    return {
        "scene_id": scene.scene_id,
        "split": scene.split,
        "objects": [
            {"object_id": o.object_id, "category": vocab.names[o.category], "box": o.box.to_dict()}
            for o in scene.objects
        ],
        "proposals": [_proposal_to_record(p) for p in scene.proposals],
        "queries": [
            {"text": q.text, "template_meta": q.template_meta.to_dict() if q.template_meta else None}
            for q in scene.queries
        ],
        "eval": {
            "queries": [{"target_id": q.eval_target} for q in scene.queries],
            "proposal_matches": [p.matched_object for p in scene.proposals],
            "gt_proposals": [
                dict(_proposal_to_record(p), object_id=p.matched_object) for p in scene.gt_proposals
            ],
        },
    }


def scene_from_record(record: dict, vocab: CategoryVocab, mode: str = "weak") -> Scene:
    """
    Construit une Scene à partir d'une ligne du jeu de données

    Args:
        record: Ligne décodée
        vocab: Vocabulaire des catégories du jeu de données
        mode: "weak" ignore les objets et la section eval, "full" les lit

    Returns:
        Scene
    """
    if mode not in LOADER_MODES:
        raise DatasetError(f"unknown loader mode '{mode}', expected one of {LOADER_MODES}")

    queries = [
        QueryRecord(q["text"], None, TemplateMeta.from_dict(q["template_meta"]) if q.get("template_meta") else None)
        for q in record["queries"]
    ]
    if mode == "weak":
        proposals = tuple(_proposal_from_record(p) for p in record["proposals"])
        return Scene(record["scene_id"], record["split"], (), proposals, tuple(queries), ())

    section = record.get("eval") or {}
    matches = section.get("proposal_matches") or [None] * len(record["proposals"])
    targets = section.get("queries") or [{}] * len(queries)
    objects = tuple(
        SceneObject(o["object_id"], vocab.index(o["category"]), Box3.from_dict(o["box"]))
        for o in record.get("objects", [])
    )
    proposals = tuple(_proposal_from_record(p, m) for p, m in zip(record["proposals"], matches))
    queries = [QueryRecord(q.text, t.get("target_id"), q.template_meta) for q, t in zip(queries, targets)]
    gt = tuple(_proposal_from_record(p, p.get("object_id")) for p in section.get("gt_proposals", []))
    return Scene(record["scene_id"], record["split"], objects, proposals, tuple(queries), gt)


class DatasetFileManager:
    """Classe pour la lecture et l'écriture des fichiers de données"""

    @staticmethod
    def meta_path(path: PathLike) -> Path:
        path = Path(path)
        return path.with_name(path.name + ".meta.json")

    def validate_output_path(self, path: PathLike) -> None:
        """
        Vérifie qu'un jeu de données peut être écrit à cet emplacement

        Raises:
            DatasetError: Si le dossier parent ne peut être créé ou écrit
        """
        directory = Path(path).parent
        try:
            directory.mkdir(parents=True, exist_ok=True)
            probe = directory / ".write_test"
            probe.touch()
            probe.unlink()
        except OSError as e:
            logger.error(f"Chemin de sortie non accessible en écriture {path}: {e}")
            raise DatasetError(f"cannot write dataset to {path}: {e}") from e

    def write_dataset(self, path: PathLike, scenes: Sequence[Scene], vocab: CategoryVocab,
                      cfg: GenConfig, seed: int) -> None:
        path = Path(path)
        meta = {
            "format_version": FORMAT_VERSION,
            "seed": seed,
            "vocab": vocab.to_dict(),
            "gen_config": cfg.model_dump(mode="json"),
        }
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                for scene in scenes:
                    f.write(_dumps(scene_to_record(scene, vocab)) + "\n")
            with open(self.meta_path(path), "w", encoding="utf-8", newline="\n") as f:
                f.write(json.dumps(meta, indent=2) + "\n")
        except OSError as e:
            raise DatasetError(f"cannot write dataset to {path}: {e}") from e
        logger.info(f"Écrit {len(scenes)} scènes dans {path} ({self.get_file_size_mb(path):.2f} MB)")

    def read_meta(self, path: PathLike) -> dict:
        meta_path = self.meta_path(path)
        try:
            with open(meta_path, encoding="utf-8") as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"cannot read dataset metadata {meta_path}: {e}") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format {meta.get('format_version')} in {meta_path}")
        return meta

    def read_vocab(self, path: PathLike) -> CategoryVocab:
        return CategoryVocab.from_dict(self.read_meta(path)["vocab"])

    def iter_records(self, path: PathLike) -> Iterator[dict]:
        try:
            with open(path, encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as e:
                        raise DatasetError(f"{path}:{line_no}: malformed record: {e}") from e
        except OSError as e:
            raise DatasetError(f"cannot read dataset {path}: {e}") from e

    def read_scenes(self, path: PathLike, mode: str = "weak", split: Optional[str] = None
                    ) -> Tuple[List[Scene], CategoryVocab]:
        """
        Charge les scènes et le vocabulaire du jeu de données

        Args:
            path: Fichier du jeu de données
            mode: "weak" (entraînement) ou "full" (évaluation)
            split: Ne garder que ce split

        Returns:
            (scenes, vocab)
        """
        vocab = self.read_vocab(path)
        scenes = [
            scene_from_record(record, vocab, mode)
            for record in self.iter_records(path)
            if split is None or record["split"] == split
        ]
        logger.info(f"Chargé {len(scenes)} scènes ({split or 'tous splits'}) depuis {path} (mode {mode})")
        return scenes, vocab

    def strip_eval(self, src: PathLike, dst: PathLike) -> None:
        """Copie un jeu de données en vidant chaque section eval et chaque liste d'objets"""
        self.validate_output_path(dst)
        with open(dst, "w", encoding="utf-8", newline="\n") as f:
            for record in self.iter_records(src):
                record["objects"] = []
                record["eval"] = {}
                f.write(_dumps(record) + "\n")
        with open(self.meta_path(src), encoding="utf-8") as f_in, \
                open(self.meta_path(dst), "w", encoding="utf-8", newline="\n") as f_out:
            f_out.write(f_in.read())

    def get_file_size_mb(self, path: PathLike) -> float:
        try:
            return Path(path).stat().st_size / (1024 * 1024)
        except OSError:
            return 0.0
