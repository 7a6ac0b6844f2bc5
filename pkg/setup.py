import os
from subprocess import getoutput

import setuptools
from setuptools import setup


def get_version_tag() -> str:
    try:
        version = os.environ["FPP_FLOWS_VERSION"]
    except KeyError:
        version = getoutput("git describe --tags --abbrev=0 2>/dev/null")
        if not version or version.startswith("fatal"):
            version = "0.0.0"

    return version


setup(
    name="fpp-flows",
    version=get_version_tag(),
    packages=setuptools.find_packages(exclude=["tests"]),
    py_modules=["run_experiment"],
    description="Monte-Carlo experiments on maximal flows in first-passage percolation.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    install_requires=[
        "networkx>=2.6",
        "numpy",
        "pyyaml",
        "scipy",
        "tqdm",
    ],
    extras_require={
        "test": [
            "black",
            "flake8",
            "isort",
            "pre-commit",
            "pytest",
            "pytest-cov",
        ]
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
)
