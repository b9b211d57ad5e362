# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import sys

from aws_lambda_powertools import Logger

from point_ln.cli import main

with open("_version.py") as f:
    version = f.readlines()[-1].split()[-1].strip("\"'")

logger = Logger(service='point-ln', stream=sys.stderr)
logger.append_keys(version=version)

sys.exit(main(sys.argv[1:]))
