from setuptools import setup, find_packages


def get_requirements():
    """Runtime package requirements"""
    return [
        'numpy>=2.1',
        'scipy>=1.14',
        'scikit-learn>=1.5',
        'matplotlib>=3.9',
        'texttable>=1.7',
        'psutil>=5.9.0',
    ]


setup(
    name='AttrEx',
    version='0.1.0',
    description='Feature attribution, explanation metrics and metric meta-evaluation for small CNNs',
    packages=find_packages(),
    install_requires=get_requirements(),
    extras_require={
        'test': ['pytest>=8.3', 'hypothesis>=6.112'],
    },
    entry_points={
        'console_scripts': [
            'attrex=src.main:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    python_requires='>=3.10',
)
