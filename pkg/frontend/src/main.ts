import { ApiClient } from './api.js';
import { bannerText, panelModel, renderSlideView } from './render.js';
import { Store, hitTestNucleus } from './state.js';
import { ScoringConfigWire } from './types.js';

/** Page bootstrap: wires the store to the DOM. Pure logic lives in
 * state.ts/render.ts; this file only touches the document. */
export function mount(root: HTMLElement, baseUrl: string, slideId: string): Store {
  const api = new ApiClient(baseUrl);
  const store = new Store(api, slideId);

  root.innerHTML = `
    <div id="banner" class="banner">Loading…</div>
    <div class="toolbar">
      <label><input type="checkbox" id="layer-nuclei" checked> nuclei</label>
      <label><input type="checkbox" id="layer-signals" checked> signals</label>
      <button id="export">Export report</button>
      <span id="toast" class="toast"></span>
    </div>
    <div class="main">
      <div class="view"><img id="base" alt="slide overlay"><canvas id="overlay"></canvas></div>
      <aside id="panel" class="panel">Select a nucleus.</aside>
    </div>
    <div class="thresholds">
      <label>HER2/CEP17 ratio <input id="t-ratio" type="range" min="1" max="4" step="0.05"><span id="t-ratio-v"></span></label>
      <label>high-amp copies <input id="t-copies" type="range" min="2" max="12" step="0.5"><span id="t-copies-v"></span></label>
      <label>min nuclei <input id="t-min" type="range" min="1" max="60" step="1"><span id="t-min-v"></span></label>
      <button id="t-commit">Apply thresholds</button>
      <button id="t-reset">Reset</button>
    </div>`;

  const canvas = root.querySelector<HTMLCanvasElement>('#overlay')!;
  const baseImg = root.querySelector<HTMLImageElement>('#base')!;
  const banner = root.querySelector<HTMLElement>('#banner')!;
  const panel = root.querySelector<HTMLElement>('#panel')!;
  const toast = root.querySelector<HTMLElement>('#toast')!;

  const sliders: Array<[string, keyof ScoringConfigWire]> = [
    ['#t-ratio', 'ratio_threshold'],
    ['#t-copies', 'high_amp_mean_her2_copies'],
    ['#t-min', 'min_evaluable_nuclei'],
  ];

  function redraw(): void {
    const s = store.state;
    banner.textContent = bannerText(s);
    banner.dataset.status = String(s.banner);
    toast.textContent = s.toast ?? '';
    if (s.report) {
      canvas.width = s.report.slide.width;
      canvas.height = s.report.slide.height;
      baseImg.src = api.overlayUrl(slideId, 'nuclei');
      const ctx = canvas.getContext('2d');
      if (ctx) {
        ctx.clearRect(0, 0, canvas.width, canvas.height);
        renderSlideView(ctx, s);
      }
      for (const [sel, field] of sliders) {
        const input = root.querySelector<HTMLInputElement>(sel)!;
        if (s.sliders && document.activeElement !== input) {
          input.value = String(s.sliders[field]);
        }
        root.querySelector(`${sel}-v`)!.textContent = input.value;
      }
      renderPanel(s.selectedNucleus);
    }
  }

  function renderPanel(nucleusId: number | null): void {
    const s = store.state;
    if (!s.report || nucleusId === null) {
      panel.textContent = s.report && s.report.nuclei.length === 0 ? 'No nuclei on this slide.' : 'Select a nucleus.';
      return;
    }
    const m = panelModel(s.report, nucleusId);
    if (!m) return;
    panel.innerHTML = `
      <h3>Nucleus ${m.nucleusId} ${m.discrepant ? '<span class="badge warn">second opinion differs</span>' : ''}</h3>
      <p>classifier: <b>${m.machineClass}</b>${m.overridden ? ` → effective <b>${m.effective}</b>` : ''}</p>
      <p class="rationale">${m.rationale ?? ''}</p>
      <p>signal grade: ${m.opinionClasses ? m.opinionClasses[1] : '–'}</p>
      <p>copies: ${m.her2Copies} HER2 / ${m.cep17Copies} CEP17 (ratio ${m.ratio === null ? 'undefined' : m.ratio.toFixed(2)})</p>
      <p>boxes: ${m.signalCounts.HER2} HER2, ${m.signalCounts.HER2Cluster} cluster, ${m.signalCounts.CEP17} CEP17</p>
      <p>${m.evaluable ? 'evaluable' : `excluded: ${m.exclusionReason ?? ''}`}</p>
      <div class="actions">
        <button data-act="exclude">Exclude</button>
        <button data-act="include">Include</button>
        <select id="set-class">
          ${['Normal', 'LowAmp', 'HighAmp', 'Artifact', 'Background'].map((c) => `<option>${c}</option>`).join('')}
        </select>
        <button data-act="set_class">Set class</button>
        <button id="cam-toggle" ${m.camAvailable ? '' : `disabled title="${m.camReason ?? 'no CAM stored'}"`}>CAM</button>
      </div>`;
    panel.querySelectorAll<HTMLButtonElement>('button[data-act]').forEach((btn) => {
      btn.onclick = () => {
        const act = btn.dataset.act as 'exclude' | 'include' | 'set_class';
        const cls = act === 'set_class' ? panel.querySelector<HTMLSelectElement>('#set-class')!.value : undefined;
        void store.applyOverride(nucleusId, act, cls);
      };
    });
    const camBtn = panel.querySelector<HTMLButtonElement>('#cam-toggle');
    if (camBtn && m.camAvailable) {
      camBtn.onclick = () => {
        store.toggle('cam');
        baseImg.src = store.state.layers.cam
          ? api.overlayUrl(slideId, 'cam', nucleusId)
          : api.overlayUrl(slideId, 'nuclei');
      };
    }
  }

  canvas.addEventListener('click', (ev) => {
    const s = store.state;
    if (!s.report) return;
    const rect = canvas.getBoundingClientRect();
    const x = ((ev.clientX - rect.left) / rect.width) * canvas.width;
    const y = ((ev.clientY - rect.top) / rect.height) * canvas.height;
    store.select(hitTestNucleus(s.report, x, y));
  });

  root.querySelector<HTMLInputElement>('#layer-nuclei')!.onchange = () => store.toggle('nuclei');
  root.querySelector<HTMLInputElement>('#layer-signals')!.onchange = () => store.toggle('signals');
  for (const [sel, field] of sliders) {
    root.querySelector<HTMLInputElement>(sel)!.oninput = (ev) => {
      store.slide(field, Number((ev.target as HTMLInputElement).value));
    };
  }
  root.querySelector<HTMLButtonElement>('#t-commit')!.onclick = () => void store.commitThresholds();
  root.querySelector<HTMLButtonElement>('#t-reset')!.onclick = () => void store.resetThresholds();
  root.querySelector<HTMLButtonElement>('#export')!.onclick = async () => {
    const bytes = await store.exportReport();
    const blob = new Blob([bytes as BlobPart], { type: 'application/json' });
    const a = document.createElement('a');
    a.href = URL.createObjectURL(blob);
    a.download = `report-${slideId.slice(0, 12)}.json`;
    a.click();
    URL.revokeObjectURL(a.href);
  };

  store.onChange(redraw);
  const poll = async (): Promise<void> => {
    const ready = await store.refresh();
    if (!ready) setTimeout(poll, 500);
  };
  void poll();
  return store;
}
