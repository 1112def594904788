// Single-page viewer: orthoslice panes, threshold slider, sub-population
// comparison, contrast builder, subject picker, and the EM monitor.

import { ApiClient, type Meta, type SlicePayload } from "./api.js";
import { parseContrastEntries } from "./contrast.js";
import { EmMonitor } from "./emMonitor.js";
import { crosshairReadout, renderSlice } from "./render.js";
import { ViewerState, filterSubjects, mapIdFor, type MapSelection } from "./state.js";

const AXES = ["sagittal", "coronal", "axial"] as const;

class ViewerApp {
  private client = new ApiClient();
  private meta!: Meta;
  private state!: ViewerState;
  private monitor = new EmMonitor(this.client);
  private slices: (SlicePayload | null)[] = [null, null, null];
  private banner = document.getElementById("banner") as HTMLDivElement;

  async start(): Promise<void> {
    try {
      this.meta = await this.client.meta();
    } catch (err) {
      this.showBanner(`service unreachable: ${err}`);
      return;
    }
    this.state = new ViewerState(this.meta.maskDims, this.meta.p);
    this.buildControls();
    await this.refreshSlices();
    await this.monitor.attach().catch((err) => this.showBanner(String(err)));
    this.drawMonitor();
  }

  private showBanner(message: string): void {
    this.banner.textContent = message;
    this.banner.hidden = message === "";
  }

  private buildControls(): void {
    const icSelect = document.getElementById("ic") as HTMLSelectElement;
    for (let l = 1; l <= this.meta.q; l++) {
      icSelect.add(new Option(`IC ${l}`, String(l)));
    }
    icSelect.onchange = () => {
      this.state.selection.ic = Number(icSelect.value);
      void this.refreshSlices();
    };

    const kindSelect = document.getElementById("kind") as HTMLSelectElement;
    kindSelect.onchange = () => {
      this.state.selection = this.selectionFor(kindSelect.value);
      void this.refreshSlices();
    };

    const slider = document.getElementById("threshold") as HTMLInputElement;
    const entry = document.getElementById("threshold-entry") as HTMLInputElement;
    const applyThreshold = (value: number) => {
      this.state.setThreshold(value);
      slider.value = String(value);
      entry.value = String(value);
      this.drawSlices(); // local redraw, no refetch
    };
    slider.oninput = () => applyThreshold(Number(slider.value));
    entry.onchange = () => {
      const value = Number(entry.value);
      if (Number.isFinite(value) && value >= 0) applyThreshold(value);
    };

    const subjectFilter = document.getElementById("subject-filter") as HTMLInputElement;
    const subjectList = document.getElementById("subject-list") as HTMLSelectElement;
    const names = Array.from({ length: this.meta.N }, (_, i) => `subject ${i + 1}`);
    const fillSubjects = () => {
      subjectList.innerHTML = "";
      for (const i of filterSubjects(names, subjectFilter.value)) {
        subjectList.add(new Option(names[i], String(i + 1)));
      }
    };
    subjectFilter.oninput = fillSubjects;
    fillSubjects();
    subjectList.onchange = () => {
      this.state.selection = { kind: "subject", ic: this.state.selection.ic, subject: Number(subjectList.value) };
      (document.getElementById("kind") as HTMLSelectElement).value = "subject";
      void this.refreshSlices();
    };

    const contrastForm = document.getElementById("contrast-form") as HTMLFormElement;
    const fields = document.getElementById("contrast-fields") as HTMLDivElement;
    this.meta.covariates.forEach((name) => {
      const label = document.createElement("label");
      label.textContent = name;
      const input = document.createElement("input");
      input.type = "text";
      input.value = "0";
      label.appendChild(input);
      fields.appendChild(label);
    });
    contrastForm.onsubmit = (event) => {
      event.preventDefault();
      const entries = Array.from(fields.querySelectorAll("input")).map((i) => i.value);
      const parsed = parseContrastEntries(entries);
      const errorBox = document.getElementById("contrast-error") as HTMLSpanElement;
      if (!parsed.ok) {
        errorBox.textContent = parsed.error;
        return;
      }
      errorBox.textContent = "";
      this.state.contrast = parsed.coefficients;
      this.state.selection = { kind: "contrast", ic: this.state.selection.ic };
      void this.refreshSlices();
    };

    const stopButton = document.getElementById("em-stop") as HTMLButtonElement;
    stopButton.onclick = () => {
      void this.monitor.requestStop().then(() => this.drawMonitor());
    };

    for (const [pane, axis] of AXES.entries()) {
      const canvas = document.getElementById(`pane-${axis}`) as HTMLCanvasElement;
      canvas.onclick = (event) => this.handleClick(pane, canvas, event);
    }
  }

  private selectionFor(kind: string): MapSelection {
    const ic = this.state.selection.ic;
    if (kind === "subject") return { kind, ic, subject: 1 };
    if (kind === "beta" || kind === "se") return { kind, ic, covariate: 1 };
    return { kind: kind as MapSelection["kind"], ic };
  }

  private async refreshSlices(): Promise<void> {
    const sel = this.state.selection;
    try {
      if (sel.kind === "contrast" || sel.kind === "subpop") {
        // POST-derived maps have no slice endpoint; fetch the blob and let
        // the service slice the matching stored kind instead when possible.
        this.showBanner("contrast/sub-population maps render from the full blob");
      }
      const mapId = sel.kind === "contrast" || sel.kind === "subpop" ? "s0/" + sel.ic : mapIdFor(sel);
      for (let pane = 0; pane < 3; pane++) {
        this.slices[pane] = await this.client.slice(
          mapId,
          AXES[pane],
          this.state.crosshair[pane],
        );
      }
      this.showBanner("");
      this.drawSlices();
    } catch (err) {
      // keep the stale panes on errors
      this.showBanner(`fetch failed: ${err}`);
    }
  }

  private drawSlices(): void {
    for (let pane = 0; pane < 3; pane++) {
      const payload = this.slices[pane];
      if (!payload) continue;
      const canvas = document.getElementById(`pane-${AXES[pane]}`) as HTMLCanvasElement;
      const [rows, cols] = payload.shape;
      canvas.width = cols;
      canvas.height = rows;
      const ctx = canvas.getContext("2d");
      if (!ctx) continue;
      const pixels = renderSlice(payload, { threshold: this.state.threshold });
      const image = ctx.createImageData(cols, rows);
      image.data.set(pixels);
      ctx.putImageData(image, 0, 0);
    }
  }

  private handleClick(pane: number, canvas: HTMLCanvasElement, event: MouseEvent): void {
    const payload = this.slices[pane];
    if (!payload) return;
    const rect = canvas.getBoundingClientRect();
    const c = Math.floor(((event.clientX - rect.left) / rect.width) * payload.shape[1]);
    const r = Math.floor(((event.clientY - rect.top) / rect.height) * payload.shape[0]);
    const readout = crosshairReadout(payload, r, c);
    try {
      this.state.setCrosshair(readout.voxel);
    } catch {
      return;
    }
    const box = document.getElementById("readout") as HTMLDivElement;
    box.textContent =
      `voxel (${readout.voxel.join(", ")})  ` +
      `world (${readout.world.map((w) => w.toFixed(1)).join(", ")})  ` +
      `${readout.unit}=${readout.value === null ? "outside mask" : readout.value}`;
    if (this.state.linkedCursor) void this.refreshSlices();
  }

  private drawMonitor(): void {
    const stopButton = document.getElementById("em-stop") as HTMLButtonElement;
    stopButton.disabled = !this.monitor.stopEnabled;
    const note = document.getElementById("em-note") as HTMLSpanElement;
    note.textContent = this.monitor.note;
    const canvas = document.getElementById("em-chart") as HTMLCanvasElement;
    const ctx = canvas.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    const series = [this.monitor.deltaGlobal, this.monitor.deltaLocal];
    const colors = ["#c0392b", "#2980b9"];
    const n = this.monitor.iterations.length;
    if (n < 2) return;
    const maxVal = Math.max(...series.flat());
    series.forEach((values, s) => {
      ctx.strokeStyle = colors[s];
      ctx.beginPath();
      values.forEach((v, i) => {
        const x = (i / (n - 1)) * canvas.width;
        const y = canvas.height - (v / maxVal) * canvas.height;
        if (i === 0) ctx.moveTo(x, y);
        else ctx.lineTo(x, y);
      });
      ctx.stroke();
    });
  }
}

new ViewerApp().start();
