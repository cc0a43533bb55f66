import os
from pathlib import Path

import PyInstaller.__main__

from lpnum.common.costmodel import DEFAULT_COST_TABLE, load_cost_table

here = Path(__file__).parent.absolute()
path_to_main = str(here / "../lpnum/cmd.py")

ARCHITECTURES = {"amd64": "x86_64", "arm64": "arm64"}


def install_amd64():
    install("amd64")


def install_arm64():
    install("arm64")


def install(platform: str):
    # fails before bundling an unreadable cost table
    load_cost_table(DEFAULT_COST_TABLE)
    PyInstaller.__main__.run([
        path_to_main,
        "--onedir",
        "--console",
        "--name", "lpnum",
        "--add-data", f"{DEFAULT_COST_TABLE}{os.pathsep}lpnum/resources",
        "--collect-submodules", "numpy",
        "--distpath", f"dist-{platform}",
        "--target-architecture", ARCHITECTURES[platform]
    ])
