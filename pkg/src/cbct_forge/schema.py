"""JSON schema for job configuration files."""
from __future__ import annotations

import jsonschema

SCHEMA_VERSION = "1.0"

_number3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "https://cbct-forge.invalid/job.schema.json",
    "title": "cbct-forge job",
    "type": "object",
    "required": ["schema_version", "pipeline"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "pipeline": {"$ref": "#/$defs/pipeline"},
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"mssim_window": {"type": "integer", "minimum": 1}},
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pct": {"type": "string"},
                "cbct": {"type": "string"},
                "labels": {"type": "string"},
                "outdir": {"type": "string"},
                "stem": {"type": "string"},
            },
        },
    },
    "$defs": {
        "plahe": {
            "type": "object",
            "required": ["alpha", "beta", "window"],
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "beta": {"type": "number", "minimum": 0, "maximum": 1},
                "window": {
                    "oneOf": [
                        {"type": "integer", "minimum": 1},
                        {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                    ]
                },
                "gain": {"type": "number", "minimum": 0},
            },
        },
        "affine": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["identity", "scale_shear", "scale_rotate", "custom"]},
                "scale": {"type": "number", "exclusiveMinimum": 0},
                "shear_deg": {"type": "number", "exclusiveMinimum": -45, "exclusiveMaximum": 45},
                "rotate_deg": {"type": "number"},
                "matrix": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                    "minItems": 4,
                    "maxItems": 4,
                },
            },
        },
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sad": {"type": "number", "exclusiveMinimum": 0},
                "sdd": {"type": "number", "exclusiveMinimum": 0},
                "det_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "det_spacing": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2},
                "n_views": {"type": "integer", "minimum": 1},
                "angles": {"oneOf": [{"type": "null"}, {"type": "array", "items": {"type": "number"}, "minItems": 1}]},
                "step_mm": {"oneOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0}]},
            },
        },
        "osart": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_subsets": {"type": "integer", "minimum": 1},
                "n_iterations": {"type": "integer", "minimum": 1},
                "relax": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 2},
                "nonneg": {"type": "boolean"},
                "init": {
                    "oneOf": [
                        {"const": "zeros"},
                        {"type": "number"},
                        {"type": "object", "required": ["constant"], "properties": {"constant": {"type": "number"}}},
                    ]
                },
            },
        },
        "grid": {
            "type": "object",
            "required": ["dims"],
            "properties": {
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "spacing_mm": _number3,
                "origin_mm": _number3,
            },
        },
        "pipeline": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "artifact_bank": {"type": "array", "items": {"$ref": "#/$defs/plahe"}, "minItems": 1},
                "geoms": {"type": "array", "items": {"$ref": "#/$defs/affine"}, "minItems": 1},
                "geometry": {"$ref": "#/$defs/geometry"},
                "osart": {"$ref": "#/$defs/osart"},
                "noise_sigma": {"type": "number", "minimum": 0},
                "seed": {"type": "integer"},
                "label_scheme": {"enum": ["eso1", "eso4"]},
            },
        },
    },
}


def validate(doc, definition: str | None = None) -> None:
    """Validate ``doc`` against the job schema or one of its ``$defs``.

    Raises ``jsonschema.ValidationError``.
    """
    schema = SCHEMA if definition is None else {"$ref": f"#/$defs/{definition}", "$defs": SCHEMA["$defs"]}
    jsonschema.Draft202012Validator(schema).validate(doc)
