import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="nimc",
    version="1.0.0",
    description="Nonlinear inductive matrix completion: models, Hessian landscape probes, tensor initialization, "
                "gradient descent and experiment pipelines.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=['joblib','numpy','pandas','scikit-learn','scipy'],
    extras_require={'tests': ['pytest']},
    entry_points={'console_scripts': ['nimc=nimc.cli:main']},
)
