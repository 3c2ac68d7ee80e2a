import setuptools

with open("dynasty/version.py") as version_file:
    version = version_file.read().split('"')[1]
    assert len(version.split(".")) == 3

with open("README.md") as readme_file:
    long_description = readme_file.read()

setuptools.setup(
    name="dynasty-forecast",
    version=version,
    description="CLI and Python library for forecasting node signals on dynamic graphs",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    entry_points={"console_scripts": "dynasty = dynasty.cli:main"},
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.24",
        "typer>=0.12.3,<0.26",
        "click>=8.0",
        "rich",
    ],
    extras_require={
        "test": [
            "pytest",
            "hypothesis",
        ],
    },
)
