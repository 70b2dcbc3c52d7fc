#!/usr/bin/env python3
"""
Configuration du logging pour WeakGround
"""

import logging
from typing import Optional

LOGGER_NAME = "weakground"


def setup_logging(log_file: Optional[str] = 'weakground.log', level: int = logging.INFO) -> logging.Logger:
    """
    Configure le logging pour l'application

    Les messages partent sur stderr (et éventuellement dans un fichier) :
    stdout reste réservé aux résultats des commandes.

    Args:
        log_file: Nom du fichier de log, None pour stderr seulement
        level: Niveau de log racine

    Returns:
        Logger configuré
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    return logging.getLogger(LOGGER_NAME)


def get_logger() -> logging.Logger:
    """
    Retourne le logger de l'application

    Returns:
        Logger configuré
    """
    return logging.getLogger(LOGGER_NAME)
