"""Independent census of the toy dataset under each bundled split file.

Counts, per setting, the images that keep at least one edge after
filtering, their nodes and edges, and images left with nodes but no edges.
"""
import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def census(images, novel_obj, novel_rel, closed):
    out = {"images": 0, "nodes": 0, "edges": 0, "detection_only_images": 0}
    for g in images:
        if closed:
            out["images"] += 1
            out["nodes"] += len(g["nodes"])
            out["edges"] += len(g["edges"])
            continue
        keep = [n["category"] not in novel_obj for n in g["nodes"]]
        edges = [e for e in g["edges"]
                 if keep[e["sub"]] and keep[e["obj"]] and e["predicate"] not in novel_rel]
        if edges:
            out["images"] += 1
            out["nodes"] += sum(keep)
            out["edges"] += len(edges)
        elif any(keep):
            out["detection_only_images"] += 1
    return out


def main():
    images = json.load(open(os.path.join(HERE, "toy_vg.json")))["images"]
    result = {}
    for setting in ["closed", "ovd", "ovr", "ovd_r"]:
        spec = json.load(open(os.path.join(HERE, f"split_{setting}.json")))
        result[setting] = census(images, set(spec["novel_objects"]),
                                 set(spec["novel_relations"]), setting == "closed")
    print(json.dumps(result, indent=1))


if __name__ == "__main__":
    main()
