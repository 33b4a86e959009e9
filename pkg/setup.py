"""
Build script for TcmCodec.

Usage:
    pip install .
    tcmcodec encode --input clip_64x64.rgb --weights model.tcmw --out clip.tcmc
"""

from setuptools import setup

setup(
    name="TcmCodec",
    version="1.0.0",
    description="Desk-scale temporal-context-mining conditional video codec",
    packages=["tcmcodec"],
    py_modules=["cli"],
    python_requires=">=3.8",
    install_requires=["numpy>=1.22", "scipy>=1.8"],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["tcmcodec=cli:main"]},
)
