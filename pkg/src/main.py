#!/usr/bin/env python3
"""
WeakGround - ancrage visuel 3D faiblement supervisé
===================================================

Point d'entrée unique de toute la chaîne :

- gen : jeu de données synthétique (scènes, propositions du détecteur, requêtes)
- train : modèle à deux branches appris sur les seules paires (scène, requête)
- eval : précision en mode détecteur ou vérité terrain
- infer : ancre une requête dans une scène stockée
- parse : analyse d'une requête, ou précision d'extraction sur un jeu de données
- ablate : les quatre configurations cumulatives de pertes
- report : résumé textuel de tout artefact ci-dessus

Code de sortie : 0 en cas de succès, 1 pour une erreur d'usage, 2 pour une erreur d'exécution.
"""

import sys
import os
from typing import List, Optional, Sequence

# Ajout du répertoire parent au path pour les imports
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.insert(0, parent_dir)

from utils.logging_config import setup_logging, get_logger
from utils.argument_parser import ArgumentParser
from src.exceptions import DatasetError, UsageError, WeakGroundError

logger = get_logger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def format_parsed(parsed) -> List[str]:
    """Affichage ligne par ligne d'un ParsedQuery"""
    lines = [
        f"tokens={' | '.join(parsed.tokens)}",
        f"target={parsed.target_phrase.text}",
        f"phrases={', '.join(p.text for p in parsed.noun_phrases)}",
    ]
    for triple in parsed.relation_triples:
        subject = parsed.noun_phrases[triple.subject].text
        anchor = parsed.noun_phrases[triple.anchor].text
        lines.append(f"triple=({triple.relation.label}, {subject}, {anchor})")
    if parsed.dropped_phrases:
        lines.append(f"dropped_phrases={parsed.dropped_phrases}")
    return lines


def format_box(box) -> str:
    return ",".join(f"{v:.4f}" for v in (*box.center, *box.size))


def cmd_gen(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.synthworld import build_dataset

    arg_parser.require(args, "out")
    summary = build_dataset(config.gen_config(), config.seed, args.out)
    lines = [f"dataset={summary.path}"]
    for split in ("train", "test"):
        lines.append(f"{split}: scenes={summary.scenes.get(split, 0)} queries={summary.queries.get(split, 0)} "
                     f"skipped={summary.skipped.get(split, 0)}")
    return lines


def cmd_train(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.trainer import train

    arg_parser.require(args, "data", "out")
    model, result = train(args.data, config.train_config(), config.model_config(), args.out)
    lines = [f"checkpoint={result.checkpoint}", f"log={result.log_path}", f"checksum={model.checksum()}"]
    if result.history:
        lines.append(f"final_total={result.history[-1]['total']!r}")
    lines.append("loss_evaluations " + " ".join(f"{k}={v}" for k, v in sorted(result.loss_counters.items())))
    return lines


def cmd_eval(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.evaluator import evaluate, write_report

    arg_parser.require(args, "data", "ckpt")
    eval_cfg = config.eval_config()
    report = evaluate(args.data, args.ckpt, eval_cfg.mode, eval_cfg)
    lines = report.summary_lines()
    if args.report:
        json_path, csv_path = write_report(report, args.report)
        lines.append(f"report={json_path} records={csv_path}")
    return lines


def cmd_infer(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.file_manager import DatasetFileManager
    from src.grounder import Grounder

    arg_parser.require(args, "ckpt", "data", "scene_id", "query")
    loader_mode = "full" if args.mode == "gt" else "weak"
    scenes, _ = DatasetFileManager().read_scenes(args.data, mode=loader_mode)
    scene = next((s for s in scenes if s.scene_id == args.scene_id), None)
    if scene is None:
        raise DatasetError(f"scene '{args.scene_id}' not found in {args.data}")
    proposals = scene.gt_proposals if args.mode == "gt" else scene.proposals

    result = Grounder.from_checkpoint(args.ckpt).infer(proposals, args.query)
    return [f"proposal={result.proposal_index} branch={result.branch} box={format_box(result.box)}"]


def cmd_parse(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.file_manager import DatasetFileManager
    from src.queryparse import extraction_accuracy, parse

    if not args.query and not args.data:
        raise UsageError("parse: one of --query or --data is required")
    if args.data:
        scenes, vocab = DatasetFileManager().read_scenes(args.data, mode="weak")
        report = extraction_accuracy([q for s in scenes for q in s.queries], vocab)
        lines = [f"queries={report.total} target_accuracy={report.target_accuracy:.4f} "
                 f"triple_accuracy={report.triple_accuracy:.4f} parse_failures={report.parse_failures}"]
        lines.extend(f"mismatch: {text}" for text in report.mismatches)
        return lines
    return format_parsed(parse(args.query, config.get("gen.category_names")))


def cmd_ablate(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.ablation import ABLATION_COLUMNS, ablate

    arg_parser.require(args, "data", "out")
    rows = ablate(args.data, config.train_config(), config.model_config(), config.eval_config(), args.out)
    lines = [",".join(ABLATION_COLUMNS)]
    lines.extend(",".join(row.as_csv_row()) for row in rows)
    lines.append(f"table={args.out}")
    return lines


def cmd_report(args, config, arg_parser: ArgumentParser) -> List[str]:
    from src.reporting import digest

    arg_parser.require(args, "input")
    return digest(args.input)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "parse": cmd_parse,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Exécute une commande

    Args:
        argv: Arguments sans le nom du programme (défaut : sys.argv[1:])

    Returns:
        Code de sortie (0 succès, 1 erreur d'usage, 2 erreur d'exécution)
    """
    arg_parser = ArgumentParser()
    try:
        args = arg_parser.parse_arguments(argv)
        config = arg_parser.get_configuration(args)
        logger.info(f"Début de la commande {args.command}")
        lines = COMMANDS[args.command](args, config, arg_parser)
        logger.info(f"Commande {args.command} terminée avec succès")
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except UsageError as e:
        logger.error(str(e))
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except WeakGroundError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Erreur fatale: {e}")
        return EXIT_RUNTIME

    for line in lines:
        print(line)
    return EXIT_OK


def main():
    """Point d'entrée principal du programme"""
    setup_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
