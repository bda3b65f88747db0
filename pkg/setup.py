import os
from setuptools import setup

README = open(os.path.join(os.path.dirname(__file__), 'README.rst')).read()

# allow setup.py to be run from any path
os.chdir(os.path.normpath(os.path.join(os.path.abspath(__file__), os.pardir)))

setup(
    name='policy-sensitivity',
    version='1.0.0',
    packages=['policy_sensitivity'],
    include_package_data=True,
    license='MIT License',
    description='Offline policy evaluation with Bayesian sensitivity bands for unmeasured confounding.',
    long_description=README,
    classifiers=[
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Mathematics',
    ],
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.8',
        'pandas>=1.5',
        'joblib>=1.1',
        'scikit-learn>=1.1',
        'Django>=3.2',
    ],
    tests_require=[
        'pytest',
    ],
    entry_points={
        'console_scripts': [
            'policy-sensitivity = policy_sensitivity.cli:main',
        ],
    },
)
