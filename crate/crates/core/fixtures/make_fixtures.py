"""Regenerates the fixture corpus and its mock-adapter sidecars.

Run from this directory: python3 make_fixtures.py
The PDF is written with reportlab in invariant mode so the bytes are stable.
"""
import json
from pathlib import Path

from reportlab.pdfgen import canvas

OUT = Path(__file__).parent / "corpus"
W, H = 612.0, 792.0
PDF_FONT, PDF_LEADING, PDF_PARA_GAP, PDF_TOP, PDF_LEFT = 11.0, 14.0, 10.0, 72.0, 72.0
TXT_FONT, TXT_LEADING, TXT_MARGIN, LINES_PER_PAGE = 9.0, 11.0, 56.0, 60

SITE_REPORT = [
    [
        ["# Hollow Creek Zinc Prospect: Field Season Summary"],
        [
            "The 2024 field season at Hollow Creek focused on the northern skarn zone.",
            "Twelve diamond drill holes were completed for a total of 3,140 metres.",
        ],
        [
            "Sphalerite is the dominant zinc mineral, occurring as disseminations and",
            "semi-massive bands within garnet-pyroxene skarn. Galena is a minor companion.",
        ],
        [
            "Access to the property is by a forestry road from Alder Junction.",
            "Camp was operated from May to September.",
        ],
    ],
    [
        [
            "Table 1: Best drill intercepts",
            "| Hole | From (m) | To (m) | Zn (%) | Pb (%) |",
            "| HC-24-03 | 112.0 | 131.5 | 7.8 | 1.2 |",
            "| HC-24-07 | 88.4 | 97.0 | 11.2 | 0.9 |",
            "| HC-24-11 | 201.3 | 214.8 | 5.4 | 2.1 |",
        ],
        [
            "Intercept lengths are core lengths; true widths are estimated at 70 to 85",
            "percent of the reported lengths.",
        ],
        ["Figure 2: Long section of the northern skarn zone"],
        [
            "![Long section through the northern skarn zone](long-section.png)",
            "The section shows the mineralised skarn dipping steeply to the east,",
            "open at depth below hole HC-24-11.",
        ],
    ],
    [
        [
            "$$ ZnEq = Zn + 0.42 \\times Pb + 0.011 \\times Ag $$",
            "Zinc equivalent grade combines zinc, lead and silver using metal prices",
            "and recoveries.",
        ],
        [
            "Recommendations: step-out drilling to test the down-dip extension, and",
            "metallurgical testwork on composite samples from HC-24-07.",
        ],
    ],
]

ASSAY_NOTES = """# Assay Laboratory Notes

Samples were crushed to 70 percent passing 2 mm and pulverised to 85 percent
passing 75 microns before four-acid digestion and ICP finish.

Table 2: Certified reference material results
| Standard | Certified Zn (%) | Measured Zn (%) |
|---|---|---|
| OREAS-133b | 6.94 | 7.02 |
| OREAS-134b | 13.2 | 13.05 |

$$ bias = (measured - certified) / certified $$
Relative bias expresses the laboratory error as a fraction of the certified value.

![Control chart for the zinc standard](control-chart.png)
The control chart shows all standard results within two standard deviations
of the certified mean.

Blanks returned zinc below 0.01 percent, indicating no contamination between
samples during preparation.
"""

FIELD_DAYS = [
    ("May 14", "Mobilised crew and opened camp at Alder Junction. Road washed out at km 12; grader booked."),
    ("May 16", "Collared HC-24-01 on the southern fence. Overburden 18 m, casing set."),
    ("May 21", "HC-24-01 ended at 240 m in marble. Weak pyrrhotite, no visible sphalerite."),
    ("May 27", "HC-24-03 intersected garnet skarn with banded sphalerite from 112 m. Core sent for rush assays."),
    ("June 3", "Rush assays for HC-24-03 returned 7.8 percent zinc over 19.5 m. Plan step-back hole."),
    ("June 11", "Black bear visited camp overnight. Food storage moved to the locked trailer."),
    ("June 18", "HC-24-07 cut semi-massive sphalerite at 88 m, the best zinc grades of the season."),
    ("June 30", "Ground magnetic survey completed over the northern grid, 42 line kilometres."),
    ("July 9", "Smoke from the Cedar Lake fire grounded the helicopter for two days."),
    ("July 22", "HC-24-11 reached the skarn at 201 m, deeper than modelled. Lead grades higher than expected."),
    ("August 4", "Density measurements on 60 core samples; average 3.1 tonnes per cubic metre in mineralised skarn."),
    ("August 19", "Geologist visit from head office. Agreed to prioritise down-dip drilling next season."),
    ("September 2", "Core logging finished. Samples shipped to the laboratory in Kamloops."),
    ("September 5", "Reclamation of drill pads HC-24-01 to HC-24-04 completed and seeded."),
    ("September 8", "Final water samples collected from Hollow Creek upstream and downstream of the camp."),
    ("September 10", "Fuel cache inventory: 14 drums diesel, 6 drums jet fuel left on site for next season."),
    ("September 12", "Camp closed and winterised. Road gates locked."),
]


def field_log():
    lines = ["Hollow Creek field log, 2024 season", ""]
    for day, note in FIELD_DAYS:
        lines.append(day)
        words, row = note.split(), ""
        for w in words:
            if len(row) + len(w) + 1 > 70:
                lines.append(row)
                row = w
            else:
                row = f"{row} {w}".strip()
        lines.append(row)
        lines.append("")
    return "\n".join(lines) + "\n"


def region_box(lines, x, first_baseline, leading, size):
    width = max(len(l) for l in lines) * size * 0.5
    return [
        round(x, 2),
        round(first_baseline - 0.75 * size, 2),
        round(x + width, 2),
        round(first_baseline + leading * (len(lines) - 1) + 0.25 * size, 2),
    ]


def classify(lines):
    first = lines[0].lstrip()
    rows = [l for l in lines if l.lstrip().startswith("|")]
    if first.startswith("#") and len(lines) == 1:
        return "Title"
    if first.startswith("$$"):
        return "Formula"
    if first.startswith("!["):
        return "Figure"
    if rows and len(rows) + 1 >= len(lines) and all(l.lstrip().startswith("|") for l in lines[1:]):
        return "Table"
    if len(lines) == 1 and first.split(" ")[0] in ("Figure", "Table"):
        return "Caption"
    return "Text"


def payload(label, lines):
    if label == "Table":
        caption = None if lines[0].startswith("|") else lines[0]
        rows = []
        for l in lines:
            if not l.startswith("|"):
                continue
            cells = [c.strip() for c in l.strip().strip("|").split("|")]
            if all(set(c) <= set("-: ") and c for c in cells):
                continue
            rows.append(cells)
        return {"kind": "table", "caption": caption, "rows": rows}
    if label == "Formula":
        body = " ".join(lines).strip()[2:]
        latex, _, rest = body.partition("$$")
        return {"kind": "formula", "latex": latex.strip(), "description": rest.strip()}
    if label == "Figure":
        alt = lines[0][2:].split("]")[0]
        return {"kind": "figure", "caption": alt, "description": " ".join(lines[1:])}
    text = " ".join(lines)
    if label == "Title":
        text = text.lstrip("#").strip()
    return {"kind": "text", "text": text}


def write_pdf(path, pages):
    c = canvas.Canvas(str(path), pagesize=(W, H), invariant=1, pageCompression=1)
    regions = []
    for index, paras in enumerate(pages):
        baseline = PDF_TOP
        page_regions = []
        for para in paras:
            label = classify(para)
            box = region_box(para, PDF_LEFT, baseline, PDF_LEADING, PDF_FONT)
            if label == "Figure":
                # detectors often overshoot figures; the pipeline must clip this to the page
                box[2] = W + 40.0
            page_regions.append({"bbox": box, "label": label, "payload": payload(label, para)})
            for line in para:
                c.setFont("Helvetica", PDF_FONT)
                c.drawString(PDF_LEFT, H - baseline, line)
                baseline += PDF_LEADING
            baseline += PDF_PARA_GAP
        regions.append({"page_index": index, "regions": page_regions})
        c.showPage()
    c.save()
    return regions


def text_regions(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    pages = []
    for p in range(0, len(lines), LINES_PER_PAGE):
        chunk = lines[p : p + LINES_PER_PAGE]
        page_regions, para, start = [], [], 0
        for i, l in enumerate(chunk + [""]):
            if l.strip():
                if not para:
                    start = i
                para.append(l.rstrip())
            elif para:
                label = classify(para)
                box = region_box(para, TXT_MARGIN, TXT_MARGIN + TXT_LEADING * (start + 1), TXT_LEADING, TXT_FONT)
                page_regions.append({"bbox": box, "label": label, "payload": payload(label, para)})
                para = []
        pages.append({"page_index": p // LINES_PER_PAGE, "regions": page_regions})
    return pages


def sidecar(name, pages):
    data = {"source_name": name, "pages": pages}
    (OUT / f"{name}.regions.json").write_text(json.dumps(data, indent=2) + "\n")


def main():
    OUT.mkdir(exist_ok=True)
    sidecar("site-report.pdf", write_pdf(OUT / "site-report.pdf", SITE_REPORT))
    (OUT / "assay-notes.md").write_text(ASSAY_NOTES)
    sidecar("assay-notes.md", text_regions(ASSAY_NOTES))
    log = field_log()
    (OUT / "field-log.txt").write_text(log)
    sidecar("field-log.txt", text_regions(log))


if __name__ == "__main__":
    main()
