/** DOM wiring: binds the studio model to controls and two compare views. */

import { StudioApi } from "./api.js";
import { normalizeDrag, scaledResolution } from "./boxmath.js";
import { StudioModel } from "./model.js";
import { PointRenderer } from "./renderer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function banner(message: string, isError = false): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = isError ? "banner error" : "banner";
  box.style.display = message ? "block" : "none";
}

export function startApp(): void {
  const api = new StudioApi("");
  const model = new StudioModel(api);
  const mainView = new PointRenderer(el<HTMLCanvasElement>("view-main"));
  const compareView = new PointRenderer(el<HTMLCanvasElement>("view-compare"));

  const levelSelect = el<HTMLSelectElement>("level");
  const sampleLabel = el<HTMLSpanElement>("active-sample");

  function redraw(): void {
    const cloud = model.visibleCloud();
    if (cloud) {
      mainView.normalColoring = model.normalColoring;
      mainView.setCloud(cloud);
      banner("");
    } else {
      mainView.clear();
      banner("empty sample: nothing to display at this level");
    }
    const prev = model.previousSample
      ? model.visibleCloud(model.previousSample)
      : null;
    if (prev) {
      compareView.normalColoring = model.normalColoring;
      compareView.setCloud(prev);
    } else {
      compareView.clear();
    }
    sampleLabel.textContent = `${model.activeSample ?? "-"} vs ${
      model.previousSample ?? "-"
    } (level ${model.visibleLevel})`;
  }

  function refreshLevels(): void {
    levelSelect.innerHTML = "";
    const levels = model.info?.levels ?? 0;
    for (let l = 1; l <= levels; l++) {
      const opt = document.createElement("option");
      opt.value = String(l);
      opt.textContent = `level ${l}`;
      if (l === model.visibleLevel) opt.selected = true;
      levelSelect.appendChild(opt);
    }
  }

  el<HTMLButtonElement>("open").onclick = async () => {
    try {
      await model.openSession(el<HTMLInputElement>("session-id").value.trim());
      refreshLevels();
      redraw();
    } catch (err) {
      banner(String(err), true);
    }
  };

  el<HTMLInputElement>("mesh-file").onchange = async (ev) => {
    const input = ev.target as HTMLInputElement;
    const file = input.files?.[0];
    if (!file) return;
    try {
      banner("extracting pyramid...");
      const format = file.name.toLowerCase().endsWith(".obj") ? "obj" : "ply";
      const id = await model.createSession(await file.arrayBuffer(), format);
      el<HTMLInputElement>("session-id").value = id;
      refreshLevels();
      banner(`session ${id} ready; train to enable sampling`);
    } catch (err) {
      banner(String(err), true);
    }
  };

  el<HTMLButtonElement>("train").onclick = async () => {
    try {
      banner("training...");
      await model.train((line) => banner(`training: ${line}`));
      banner("training done");
    } catch (err) {
      banner(String(err), true);
    }
  };

  el<HTMLButtonElement>("generate").onclick = async () => {
    try {
      await model.generate();
      redraw();
    } catch (err) {
      banner(String(err), true);
    }
  };

  levelSelect.onchange = () => {
    model.visibleLevel = parseInt(levelSelect.value, 10);
    redraw();
  };

  el<HTMLInputElement>("normal-color").onchange = (ev) => {
    model.normalColoring = (ev.target as HTMLInputElement).checked;
    redraw();
  };

  const boxInputs = ["bx0", "by0", "bz0", "bx1", "by1", "bz1"].map((id) =>
    el<HTMLInputElement>(id),
  );
  function readSelection(): void {
    const vals = boxInputs.map((inp) => parseFloat(inp.value));
    const res = model.levelResolution(model.visibleLevel);
    model.selection = normalizeDrag(
      [vals[0], vals[1], vals[2]],
      [vals[3], vals[4], vals[5]],
      res,
    );
    el<HTMLSpanElement>("selection-state").textContent = model.selection
      ? `box ${model.selection.min} .. ${model.selection.max}`
      : "selection invalid";
  }
  boxInputs.forEach((inp) => (inp.oninput = readSelection));

  el<HTMLButtonElement>("paste").onclick = async () => {
    try {
      const dst: [number, number, number] = [
        parseInt(el<HTMLInputElement>("dx").value, 10),
        parseInt(el<HTMLInputElement>("dy").value, 10),
        parseInt(el<HTMLInputElement>("dz").value, 10),
      ];
      banner("regenerating finer levels...");
      await model.submitEdit(dst);
      redraw();
      banner("edit applied");
    } catch (err) {
      banner(String(err), true);
    }
  };

  el<HTMLButtonElement>("resize").onclick = async () => {
    try {
      const factors: [number, number, number] = [
        parseFloat(el<HTMLInputElement>("sx").value),
        parseFloat(el<HTMLInputElement>("sy").value),
        parseFloat(el<HTMLInputElement>("sz").value),
      ];
      const base = model.levelResolution(1);
      banner("sampling at new span...");
      await model.resize(scaledResolution(base, factors));
      refreshLevels();
      redraw();
      banner("resized sample ready");
    } catch (err) {
      banner(String(err), true);
    }
  };
}

startApp();
