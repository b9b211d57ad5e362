# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

from pathlib import Path

with open(Path(__file__).resolve().parent.parent / '_version.py') as f:
    __version__ = f.readlines()[-1].split()[-1].strip("\"'")
