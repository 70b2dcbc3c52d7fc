#!/usr/bin/env python3
"""
Gestion des arguments de ligne de commande pour WeakGround
"""

import argparse
import sys
import os
from typing import List, Optional, Sequence

# Ajouter le répertoire parent au path pour les imports
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from src.exceptions import UsageError
from utils.logging_config import get_logger

logger = get_logger()

SUBCOMMANDS = ("gen", "train", "eval", "infer", "parse", "ablate", "report")


class _RaisingParser(argparse.ArgumentParser):
    """Parser argparse qui lève UsageError au lieu de quitter"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


class ArgumentParser:
    """Gestionnaire des arguments de ligne de commande"""

    def __init__(self):
        self.parser = self._create_parser()

    def _common_options(self) -> argparse.ArgumentParser:
        common = _RaisingParser(add_help=False)
        common.add_argument(
            "--config", "-c",
            default="default",
            help="Fichier de configuration JSON plat, ou 'default' pour les valeurs intégrées"
        )
        common.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Graine aléatoire (défaut : valeur de la configuration, 0 de base)"
        )
        common.add_argument(
            "--out", "-o",
            help="Chemin de sortie"
        )
        common.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Surcharge une clé de configuration pointée, ex. model.embed_dim=32"
        )
        return common

    def _create_parser(self) -> argparse.ArgumentParser:
        """Crée le parser avec un sous-parser par commande"""
        parser = _RaisingParser(
            prog="weakground",
            description="WeakGround - Ancrage visuel 3D faiblement supervisé sur scènes synthétiques"
        )
        common = self._common_options()
        commands = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
        commands.required = True

        commands.add_parser("gen", parents=[common], help="Génère un jeu de données synthétique (--out)")

        train = commands.add_parser("train", parents=[common], help="Entraîne un checkpoint (--data, --out)")
        train.add_argument("--data", help="Fichier du jeu de données")

        evaluate = commands.add_parser("eval", parents=[common], help="Évalue un checkpoint")
        evaluate.add_argument("--data", help="Fichier du jeu de données")
        evaluate.add_argument("--ckpt", help="Fichier checkpoint")
        evaluate.add_argument("--mode", choices=("detector", "gt"), default=None,
                              help="Source des propositions (défaut : eval.mode de la configuration)")
        evaluate.add_argument("--report", help="Chemin du rapport JSON ; le CSV par requête est écrit à côté")

        infer = commands.add_parser("infer", parents=[common], help="Ancre une requête dans une scène")
        infer.add_argument("--ckpt", help="Fichier checkpoint")
        infer.add_argument("--data", help="Fichier du jeu de données contenant la scène")
        infer.add_argument("--scene-id", dest="scene_id", help="Identifiant de la scène")
        infer.add_argument("--query", help="Texte de la requête")
        infer.add_argument("--mode", choices=("detector", "gt"), default="detector",
                           help="Source des propositions (défaut : detector)")

        parse = commands.add_parser("parse", parents=[common],
                                    help="Analyse une requête ou vérifie les requêtes d'un jeu de données")
        parse.add_argument("--query", help="Texte de la requête")
        parse.add_argument("--data", help="Fichier du jeu de données ; affiche la précision d'extraction")

        ablate = commands.add_parser("ablate", parents=[common],
                                     help="Lance l'ablation des pertes en quatre lignes (--data, --out)")
        ablate.add_argument("--data", help="Fichier du jeu de données")

        report = commands.add_parser("report", parents=[common], help="Résume un artefact CSV, log ou JSON")
        report.add_argument("--in", dest="input", help="Artefact à résumer")

        return parser

    def parse_arguments(self, argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
        """Parse les arguments de ligne de commande"""
        return self.parser.parse_args(argv)

    def require(self, args: argparse.Namespace, *names: str) -> None:
        """
        Vérifie la présence des options propres à la sous-commande

        Raises:
            UsageError: En nommant chaque option manquante
        """
        missing: List[str] = ["--" + ("in" if n == "input" else n.replace("_", "-"))
                              for n in names if getattr(args, n, None) in (None, "")]
        if missing:
            raise UsageError(f"{args.command}: missing required flag(s): {', '.join(missing)}")

    def get_configuration(self, args: argparse.Namespace):
        """
        Configuration en couches pour les arguments parsés

        Priorité : option > fichier de configuration > valeur intégrée.

        Returns:
            Instance de Config
        """
        from config.config import Config

        config = Config(args.config)
        config.apply_assignments(args.set)
        if args.seed is not None:
            config.update({"seed": args.seed})
        if getattr(args, "mode", None) is not None and args.command == "eval":
            config.update({"eval.mode": args.mode})

        if not config.validate_config():
            raise UsageError("invalid configuration; see the log for details")
        source = config.config_file or "valeurs intégrées"
        logger.info(f"Configuration utilisée: {source}")
        return config
