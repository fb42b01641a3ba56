import { NucleusWire, SlideReportWire, effectiveClass } from './types.js';
import { ViewState } from './state.js';

/** Subset of CanvasRenderingContext2D the renderer needs; lets tests record
 * draw calls without a browser canvas. */
export interface Draw2D {
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  stroke(): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
}

export const CLASS_COLORS: Record<string, string> = {
  Normal: '#50dc64',
  LowAmp: '#ffaa28',
  HighAmp: '#ff3c3c',
  Artifact: '#969696',
  Background: '#5a78dc',
};

export const SIGNAL_COLORS: Record<string, string> = {
  HER2: '#ff5050',
  HER2Cluster: '#ff0078',
  CEP17: '#50ff50',
};

export function polygonPath(n: NucleusWire): Array<[number, number]> {
  const [cx, cy] = n.polygon.center;
  return n.polygon.distances.map((d, k) => {
    const theta = (2 * Math.PI * k) / n.polygon.distances.length;
    return [cx + d * Math.cos(theta), cy + d * Math.sin(theta)] as [number, number];
  });
}

/**
 * Draw the slide view: polygons color-coded by effective class, signal boxes,
 * selection highlight, and the empty-state message. Status itself lives in
 * the banner element, not the canvas.
 */
export function renderSlideView(ctx: Draw2D, state: ViewState): void {
  const report = state.report;
  if (!report) return;
  if (report.nuclei.length === 0) {
    ctx.fillStyle = '#cccccc';
    ctx.fillText('No nuclei detected on this slide', 16, 24);
    return;
  }
  if (state.layers.nuclei) {
    for (const n of report.nuclei) {
      const selected = state.selectedNucleus === n.id;
      const pendingHere = state.pending !== null && state.pending.nucleusId === n.id;
      ctx.strokeStyle = CLASS_COLORS[effectiveClass(n)] ?? '#ffffff';
      ctx.lineWidth = selected ? 3 : 1;
      const path = polygonPath(n);
      ctx.beginPath();
      ctx.moveTo(path[0][0], path[0][1]);
      for (const [x, y] of path.slice(1)) ctx.lineTo(x, y);
      ctx.closePath();
      ctx.stroke();
      if (pendingHere) {
        // provisional edit: dashed-look double outline until acknowledged
        const [bx, by] = n.polygon.center;
        ctx.strokeStyle = '#ffff00';
        ctx.lineWidth = 1;
        const r = Math.max(...n.polygon.distances) + 3;
        ctx.strokeRect(bx - r, by - r, 2 * r, 2 * r);
      }
    }
  }
  if (state.layers.signals) {
    for (const n of report.nuclei) {
      for (const s of n.signals) {
        ctx.strokeStyle = SIGNAL_COLORS[s.class];
        ctx.lineWidth = 1;
        const [x0, y0, x1, y1] = s.box;
        ctx.strokeRect(x0, y0, x1 - x0, y1 - y0);
      }
    }
  }
}

export interface PanelModel {
  nucleusId: number;
  machineClass: string;
  effective: string;
  rationale: string | null;
  her2Copies: number;
  cep17Copies: number;
  ratio: number | null;
  evaluable: boolean;
  exclusionReason: string | null;
  discrepant: boolean;
  opinionClasses: [string, string] | null;
  camAvailable: boolean;
  camReason: string | null;
  overridden: boolean;
  signalCounts: Record<string, number>;
}

/** Everything the nucleus side panel shows, derived from one record. */
export function panelModel(report: SlideReportWire, nucleusId: number): PanelModel | null {
  const n = report.nuclei.find((r) => r.id === nucleusId);
  if (!n) return null;
  const counts: Record<string, number> = { HER2: 0, HER2Cluster: 0, CEP17: 0 };
  for (const s of n.signals) counts[s.class] += 1;
  return {
    nucleusId: n.id,
    machineClass: n.classifier.class,
    effective: effectiveClass(n),
    rationale: n.classifier.rationale,
    her2Copies: n.score.her2_copies,
    cep17Copies: n.score.cep17_copies,
    ratio: n.score.ratio,
    evaluable: n.score.evaluable,
    exclusionReason: n.score.exclusion_reason,
    discrepant: n.second_opinion !== null && n.second_opinion.status === 'discrepant',
    opinionClasses: n.second_opinion ? n.second_opinion.classes : null,
    camAvailable: n.cam !== null,
    camReason: n.cam_reason,
    overridden: n.override !== null,
    signalCounts: counts,
  };
}

export function bannerText(state: ViewState): string {
  if (state.banner === 'Loading') return 'Loading…';
  const st = state.report ? state.report.status : null;
  const extra = st && st.mean_ratio !== null ? ` (ratio ${st.mean_ratio.toFixed(2)}, ${st.evaluable_count} nuclei)` : st ? ` (${st.evaluable_count} nuclei)` : '';
  return `HER2 status: ${state.banner}${extra}`;
}
